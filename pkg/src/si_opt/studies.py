"""Scenario runners: multi-drop termination, link width and length sweep."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .channel import ConnectorSpec, LinkSpec, simulate_link
from .circuit import (ALL_GROUPS, SERIES_GROUPS, SHUNT_GROUPS, MultidropSpec,
                      build_multidrop, run_transient)
from .deck import ScenarioIR, lower_to_ir, parse_text
from .measure import (EyeMask, auto_center_window, check_edge_fidelity, fold_eye,
                      masked_values)
from .optimize import (OptimizeError, OptStageResult, OptVariable, PruneRule, err_fun,
                       minimize, prune_topology, round_practical)
from .sources import prbs_bits
from .waveform import Waveform

STUDIES = ("multidrop", "linkwidth", "length-sweep")
EMIT = ("csv", "svg", "both")
HSTL_MARGIN = 0.2
DEFAULT_LENGTHS = (0.15, 0.3, 0.45, 0.6)
_BUILTIN = {"multidrop": "multidrop.sp", "linkwidth": "linkwidth.sp",
            "length-sweep": "linkwidth.sp"}


class StudyError(ValueError):
    pass


@dataclass
class StudyConfig:
    """What to run and where to put the artifacts.

    ``overrides`` uses dotted keys: ``multidrop.<field>``, ``link.<field>``,
    ``link.connector.<field>``, ``link.driver.<field>``, ``param.<name>``,
    ``goal.<measure>`` and ``study.<option>``.  Study options are
    ``prune``, ``short_threshold``, ``open_threshold``, ``rounds``,
    ``length`` (card = backplane = length), ``lengths`` (colon separated),
    ``n_bits`` and ``samples_per_bit``.
    """

    study: str
    deck: str | Path | None = None
    overrides: dict = field(default_factory=dict)
    out_dir: str | Path | None = None
    emit: str = "both"
    iterate_to_convergence: bool = False
    seed: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.study not in STUDIES:
            raise StudyError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        if self.emit not in EMIT:
            raise StudyError(f"emit must be one of {EMIT}")
        if self.jobs < 1:
            raise StudyError("jobs must be >= 1")
        known = ("multidrop.", "link.", "param.", "goal.", "study.")
        for key in self.overrides:
            if not key.startswith(known):
                raise StudyError(f"override {key!r} has no recognised prefix {known}")

    def with_overrides(self, **kv) -> "StudyConfig":
        return replace(self, overrides={**self.overrides, **kv})

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.overrides.items()
                if k.startswith(p) and "." not in k[len(p):]}

    def option(self, name, default):
        raw = self.overrides.get("study." + name)
        if raw is None:
            return default
        if isinstance(default, bool):
            return _as_bool(raw)
        if isinstance(default, tuple):
            if isinstance(raw, str):
                return tuple(float(x) for x in raw.split(":") if x)
            return tuple(float(x) for x in raw)
        return type(default)(float(raw)) if isinstance(default, int) else float(raw)


@dataclass
class StudyReport:
    study: str
    stages: list = field(default_factory=list)
    baseline_opening: float | None = None
    final_opening: float | None = None
    receiver_openings: dict = field(default_factory=dict)
    baseline_receivers: dict = field(default_factory=dict)
    prune_history: list = field(default_factory=list)
    final_values: dict = field(default_factory=dict)
    sweep_rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    waveforms: dict = field(default_factory=dict)
    eyes: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    flagged: bool = False

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(self.checks.values())


def _as_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise StudyError(f"not a boolean: {raw!r}")


def _as_number(raw):
    if isinstance(raw, (int, float)):
        return raw
    from .units import parse_value

    return parse_value(str(raw))


def _apply(obj, values: Mapping, what: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    kw = {}
    for key, raw in values.items():
        if key not in names:
            raise StudyError(f"unknown {what} field {key!r}")
        cur = getattr(obj, key)
        if key == "prune" or dataclasses.is_dataclass(cur):
            raise StudyError(f"{what}.{key} cannot be set from an override")
        num = _as_number(raw)
        kw[key] = int(num) if isinstance(cur, int) and not isinstance(cur, bool) else float(num)
    try:
        return replace(obj, **kw)
    except ValueError as exc:
        raise StudyError(f"invalid {what} override: {exc}") from None


def load_ir(cfg: StudyConfig) -> ScenarioIR:
    if cfg.deck is None:
        text = resources.files("si_opt.decks").joinpath(_BUILTIN[cfg.study]).read_text()
    else:
        text = Path(cfg.deck).read_text()
    ir = lower_to_ir(parse_text(text, strict=True))
    for key, raw in cfg.overrides.items():
        if key.startswith("goal."):
            name = key[5:]
            if name not in ir.measures:
                raise StudyError(f"no measure {name!r} to set a GOAL on")
            ir.measures[name] = replace(ir.measures[name], goal=float(_as_number(raw)))
    for m in ir.measures.values():
        if m.goal is not None:
            err_fun(m.goal, 0.0)
    return ir


def param_overrides(cfg: StudyConfig) -> dict:
    return {k: float(_as_number(v)) for k, v in cfg.section("param").items()}


# --------------------------------------------------------------------------
# multi-drop

def multidrop_spec(cfg: StudyConfig, env: Mapping[str, float]) -> MultidropSpec:
    spec = MultidropSpec(bit_period=env.get("period", MultidropSpec.bit_period),
                         vtt=env.get("vref", MultidropSpec.vtt))
    if cfg.seed is not None:
        spec = replace(spec, prbs_seed=int(cfg.seed))
    return _apply(spec, cfg.section("multidrop"), "multidrop")


class _MultidropEval:
    """Per-receiver auto-centred ``eye_open`` for one topology."""

    def __init__(self, ir, spec, stage):
        self.ir, self.spec, self.stage = ir, spec, stage
        self.measure = ir.measures[stage.measure]
        self.net = build_multidrop(spec)
        self.n_evals = 0

    def simulate(self, env):
        params = {g: env[g] for g in ALL_GROUPS}
        self.n_evals += 1
        return run_transient(self.net, params, self.stage.tstep, self.stage.tstop)

    def openings(self, env, waves=None) -> dict:
        waves = waves or self.simulate(env)
        out = {}
        for rcv in self.spec.receivers():
            sig = waves[rcv]
            _, delay = auto_center_window(sig, env["vref"], env["eye_mask"], env["period"],
                                          self.measure.t_from)
            env_d = {**env, "delay": delay}
            win = self.ir.source_waveforms(env_d, sig.times())["win"]
            res = self.measure.evaluate({"sig": sig, "win": win}, env_d)
            out[rcv] = (res.value, delay)
        return out

    def vector(self, env) -> np.ndarray:
        return np.array([v for v, _ in self.openings(env).values()])


def _baseline_values(env):
    vals = dict(env)
    vals.update({g: 1.0 for g in SERIES_GROUPS})
    vals.update(shunt_r_drvr=1000.0, shunt_r_primary=1000.0, shunt_r_rcvr=50.0,
                z_primary=50.0, z_stub=50.0)
    return vals


def _baseline_prune():
    prune = {g: "short" for g in SERIES_GROUPS}
    prune.update(shunt_r_drvr="open", shunt_r_primary="open")
    return prune


def _prune_rules(cfg):
    short = cfg.option("short_threshold", 5.0)
    open_ = cfg.option("open_threshold", 500.0)
    rules = {g: PruneRule("series", short, open_) for g in SERIES_GROUPS}
    rules.update({g: PruneRule("shunt", short, open_) for g in SHUNT_GROUPS})
    return rules


def run_multidrop(cfg: StudyConfig) -> StudyReport:
    ir = load_ir(cfg)
    if not ir.stages:
        raise StudyError("multi-drop deck has no optimization stage")
    stage = ir.stages[0]
    env = ir.resolve(param_overrides(cfg))
    spec = multidrop_spec(cfg, env)
    rep = StudyReport("multidrop")
    check_edge_fidelity(stage.tstep, spec.edge)
    goal = ir.measures[stage.measure].goal
    model = ir.models[stage.model]

    # conventional termination: one 50 ohm to VTT at the far end
    base = _MultidropEval(ir, spec.with_prune(_baseline_prune()), stage)
    base_env = _baseline_values(env)
    base_waves = base.simulate(base_env)
    base_open = base.openings(base_env, base_waves)
    rep.baseline_receivers = {k: v for k, (v, _) in base_open.items()}
    rep.baseline_opening = min(rep.baseline_receivers.values())
    rep.waveforms["baseline"] = {r: base_waves[r] for r in spec.receivers()}

    do_prune = cfg.option("prune", True)
    rounds = cfg.option("rounds", 4 if do_prune else 2)
    rules = _prune_rules(cfg)
    decisions = {g: "keep" for g in rules}
    current = dict(env)
    variables = ir.variables(stage.group, current)
    for rnd in range(1, rounds + 1):
        live = [v for v in variables if decisions.get(v.name, "keep") == "keep"]
        if not live:
            break
        ev = _MultidropEval(ir, spec.with_prune(decisions), stage)

        def objective(assign, ev=ev):
            return ev.vector({**current, **assign})

        try:
            res = minimize(objective, live, goal, model, name=f"round{rnd}")
        except OptimizeError as exc:
            rep.flagged = True
            rep.notes.append(f"round {rnd} failed: {exc}")
            break
        res.n_evals = ev.n_evals
        rep.stages.append(res)
        if not res.converged:
            rep.flagged = True
            rep.notes.append(f"round {rnd}: {res.status}")
        current.update(res.values)
        variables = [OptVariable(v.name, v.init, v.min, v.max, current[v.name])
                     for v in variables]
        if not do_prune:
            rep.prune_history.append({"round": rnd, "decisions": dict(decisions),
                                      "new": {}})
            continue
        new = prune_topology(res, rules, decisions)
        changed = {g: a for g, a in new.items() if a != decisions.get(g)}
        decisions = new
        rep.prune_history.append({"round": rnd, "decisions": dict(decisions),
                                  "new": changed})
        if not changed:
            break

    live = [v.name for v in variables if decisions.get(v.name, "keep") == "keep"]
    rounded = round_practical({k: current[k] for k in live})
    final_vals = {**current, **rounded}
    rep.final_values = {k: final_vals[k] for k in live}
    rep.extras["prune"] = {g: a for g, a in decisions.items() if a != "keep"}
    final = _MultidropEval(ir, spec.with_prune(decisions), stage)
    final_waves = final.simulate(final_vals)
    fin = final.openings(final_vals, final_waves)
    rep.receiver_openings = {k: v for k, (v, _) in fin.items()}
    rep.extras["window_delay"] = {k: d for k, (_, d) in fin.items()}
    rep.final_opening = min(rep.receiver_openings.values())
    rep.waveforms["final"] = {r: final_waves[r] for r in spec.receivers()}
    win = EyeMask.window(env["eye_mask"], env["period"])
    t_from = ir.measures[stage.measure].t_from
    for rcv, (_, delay) in fin.items():
        w = final_waves[rcv].window(t_from) if t_from else final_waves[rcv]
        # window opens at the start of the plotted period
        rep.eyes[rcv] = (fold_eye(w, env["period"], offset=delay), win.with_delay(delay),
                         env["vref"])
    worst = min(rep.receiver_openings, key=rep.receiver_openings.get)
    rep.notes.append(f"worst-case receiver {worst}: {rep.final_opening * 1e3:.1f} mV")
    if spec.n_loads == 1:
        # point to point: the matched far-end termination already passes
        rep.checks = {
            "baseline meets HSTL margin": rep.baseline_opening >= HSTL_MARGIN,
            "all receivers meet HSTL margin": rep.final_opening >= HSTL_MARGIN,
        }
        return rep
    rep.checks = {
        "baseline below HSTL margin": rep.baseline_opening < HSTL_MARGIN,
        "all receivers meet HSTL margin": rep.final_opening >= HSTL_MARGIN,
        "final >= baseline + 100 mV": rep.final_opening >= rep.baseline_opening + 0.1,
    }
    return rep


# --------------------------------------------------------------------------
# link width

@dataclass
class _LinkGrid:
    n_bits: int
    samples_per_bit: int
    bits: np.ndarray


def link_spec(cfg: StudyConfig, bit_period: float) -> LinkSpec:
    link = LinkSpec(bit_rate=1.0 / bit_period)
    sec = cfg.section("link")
    length = cfg.overrides.get("study.length")
    if length is not None:
        L = float(_as_number(length))
        link = replace(link, card_length=L, backplane_length=L)
    if "bit_rate" in sec:
        raise StudyError("set the bit rate through param.bit_period")
    link = _apply(link, sec, "link")
    conn = cfg.section("link.connector")
    if conn:
        link = replace(link, connector=_apply(link.connector or ConnectorSpec(), conn,
                                              "link.connector"))
    drv = cfg.section("link.driver")
    if drv:
        link = replace(link, driver=_apply(link.driver, drv, "link.driver"))
    return link


def _grid(cfg, stage, bit_period, fast=False) -> _LinkGrid:
    if fast:
        n_bits, spb = 256, 16
    else:
        spb = int(round(bit_period / stage.tstep))
        n_bits = int(round(stage.tstop / bit_period))
    n_bits = cfg.option("n_bits", n_bits)
    spb = cfg.option("samples_per_bit", spb)
    if spb < 4 or n_bits < 8:
        raise StudyError("link grid needs >= 4 samples/bit and >= 8 bits")
    order, seed = 7, cfg.seed
    base = prbs_bits(order, seed=seed)
    bits = np.tile(base, n_bits // base.size + 1)[:n_bits]
    return _LinkGrid(n_bits, spb, bits)


class LinkProblem:
    """Deck-driven masked measures on a simulated differential link."""

    def __init__(self, ir: ScenarioIR, link: LinkSpec, grid: _LinkGrid, env: Mapping):
        self.ir, self.link, self.grid = ir, link, grid
        self.env = dict(env)
        self._sims = {}

    def simulate(self, env) -> Waveform:
        geom = self.ir.geometry_at(env)
        key = tuple(dataclasses.astuple(geom))
        w = self._sims.get(key)
        if w is None:
            w = simulate_link(replace(self.link, geometry=geom), self.grid.bits,
                              self.grid.samples_per_bit)
            self._sims[key] = w
        return w

    def waveforms(self, env, sig=None) -> dict:
        sig = sig or self.simulate(env)
        out = {"inp": Waveform(sig.t0, sig.dt, sig.samples / 2),
               "inn": Waveform(sig.t0, sig.dt, -sig.samples / 2)}
        out.update(self.ir.source_waveforms(env, sig.times()))
        return out

    def measure(self, name, assign=None, env=None) -> float:
        env = env or self.ir.resolve({**self.env, **(assign or {})})
        return self.ir.measures[name].evaluate(self.waveforms(env), env).value

    def mask(self, env) -> EyeMask:
        return EyeMask("hexagon-half", _mask_amp(self.ir, env), env["mask_delay"],
                       env["mask_rise"], env["mask_fall"], env["mask_high_time"],
                       env["bit_period"])

    def touching_edge(self, env) -> str:
        """Which mask edge the eye comes closest to."""
        sig = self.simulate(env)
        mask = self.mask(env)
        t_from = self.ir.measures[self.min_name].t_from or 0.0
        w = sig.window(t_from)
        vals = masked_values(w, mask, 10.0)
        k = int(np.argmin(vals))
        phase = (w.t0 + k * w.dt - mask.delay) % mask.period
        centre = mask.rise + mask.high_time / 2
        return "leading" if phase < centre else "trailing"

    min_name = "min_eye_opening"
    avg_name = "avg_eye_opening"


def _mask_amp(ir, env):
    for e in ir.elements:
        if e.kind == "V" and e.nodes[0] == "mask_p" and e.source.kind == "pulse":
            from .expr import eval_expr

            return float(eval_expr(e.source.args[1], env))
    return 0.165


def _delay_seeder(n=32):
    def seed(variables, objective):
        out = {}
        for v in variables:
            lo, hi = v.min, v.max
            grid = lo + (hi - lo) * np.arange(n) / n
            vals = [float(np.atleast_1d(objective({v.name: d}))[0]) for d in grid]
            best = float(grid[int(np.argmax(vals))])
            period = (hi - lo) / 2
            # pick the equivalent maximum away from the bounds
            while best < lo + period / 2:
                best += period
            while best >= lo + 1.5 * period:
                best -= period
            out[v.name] = best
        return out
    return seed


def _stage_objective(prob, stage, current):
    name = stage.measure

    def objective(assign):
        return prob.measure(name, {**current, **assign})
    return objective


def _run_link_stage(prob, stage, current, rep):
    ir = prob.ir
    variables = ir.variables(stage.group, current)
    objective = _stage_objective(prob, stage, current)
    m = ir.measures[stage.measure]
    if m.reducer == "AVG" and any("delay" in v.name for v in variables):
        seeded = _delay_seeder()(variables, objective)
        variables = [OptVariable(v.name, v.init, v.min, v.max, seeded.get(v.name, v.current))
                     for v in variables]
    res = minimize(objective, variables, m.goal, ir.models[stage.model],
                   name=f"stage{len(rep.stages) + 1}:{stage.group}")
    if m.reducer == "MIN":
        res = _feasibility_guard(prob, stage, current, variables, res, rep)
    rep.stages.append(res)
    if not res.converged:
        rep.notes.append(f"{res.name}: {res.status}")
    current.update(res.values)
    return res


def _feasibility_guard(prob, stage, current, variables, res, rep):
    """Keep the smallest feasible width when the local search lands in a closed eye."""
    if len(variables) != 1:
        return res
    v = variables[0]
    f = _stage_objective(prob, stage, current)
    if f(res.values) >= 0:
        return res
    hi = v.max
    if f({v.name: hi}) < 0:
        # no width clears the mask: the minimal tolerable width is the cap
        rep.notes.append(f"{res.name}: eye violates the mask even at the width cap")
        values = {**res.values, v.name: hi}
        return replace(res, values=values, result=float(f(values)),
                       status=res.status + "; infeasible, held at width cap")
    lo = res.values[v.name]
    if lo >= hi:
        return res
    tol = 1e-3 * (v.max - v.min) * 1e-2
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f({v.name: mid}) >= 0:
            hi = mid
        else:
            lo = mid
    rep.notes.append(f"{res.name}: local search ended in a closed eye; "
                     f"bisected to the feasibility edge")
    values = {**res.values, v.name: hi}
    return replace(res, values=values, result=float(f(values)),
                   status=res.status + "; bisected to feasibility edge")


def run_linkwidth(cfg: StudyConfig, fast: bool = False, ir: ScenarioIR | None = None
                  ) -> StudyReport:
    ir = ir or load_ir(cfg)
    if not ir.stages:
        raise StudyError("link deck has no optimization stage")
    if ir.geometry_decl is None:
        raise StudyError("link deck declares no stripline geometry")
    env0 = ir.resolve(param_overrides(cfg))
    T = env0["bit_period"]
    grid = _grid(cfg, ir.stages[0], T, fast)
    link = link_spec(cfg, T)
    rep = StudyReport("linkwidth")
    rise = link.driver.edge_ui / 0.6 * T  # full 0-100 % ramp of the drive
    check_edge_fidelity(T / grid.samples_per_bit, rise)
    prob = LinkProblem(ir, link, grid, env0)
    current = {k: env0[k] for k, p in ir.params.items() if p.kind == "opt"}

    stages = list(ir.stages)
    max_passes = 10 if cfg.iterate_to_convergence else 1
    width_hist = []
    for npass in range(max_passes):
        for stage in stages:
            try:
                _run_link_stage(prob, stage, current, rep)
            except OptimizeError as exc:
                rep.flagged = True
                rep.notes.append(f"stage failed: {exc}")
                rep.stages.append(OptStageResult(dict(current), {}, 0, False, math.inf,
                                                 f"failed: {exc}", failed=True))
                break
        if "linewidth" in current:
            width_hist.append(current["linewidth"])
        if len(width_hist) >= 2 and abs(width_hist[-1] - width_hist[-2]) < 0.1e-6:
            break
    if cfg.iterate_to_convergence:
        rep.notes.append(f"schedule passes: {len(width_hist)}")

    env = ir.resolve({**env0, **current})
    min_open = prob.measure(prob.min_name, env=env)
    avg_open = prob.measure(prob.avg_name, env=env)
    geom = ir.geometry_at(env)
    rep.final_values = dict(current)
    rep.final_opening = min_open
    rep.extras.update(avg_opening=avg_open, geometry=geom, link=replace(link, geometry=geom),
                      touching_edge=prob.touching_edge(env), grid=grid,
                      rlgc_file=_rlgc_file(ir))
    feasible = min_open >= 0
    if not feasible:
        rep.flagged = True
        rep.notes.append("infeasible at this length: eye violates the mask at max width")
    rep.extras["feasible"] = feasible
    sig = prob.simulate(env)
    rep.waveforms["final"] = {"v_diff": sig}
    t_from = ir.measures[prob.min_name].t_from or 0.0
    mask = prob.mask(env)
    # centre the mask in the plotted unit interval
    lead = (T - (mask.rise + mask.high_time + mask.fall)) / 2
    offset = (mask.delay - lead) % T
    rep.eyes["rx"] = (fold_eye(sig.window(t_from), T, offset=offset), mask, 0.0)
    rep.checks = {"final MIN opening >= 0": feasible}
    return rep


def _rlgc_file(ir):
    return ir.geometry_decl.rlgc_file or "w_diffpair.rlgc"


def _sweep_point(args):
    cfg, length = args
    c = cfg.with_overrides(**{"study.length": length})
    try:
        rep = run_linkwidth(c, fast=True)
    except (OptimizeError, StudyError, ValueError) as exc:
        return {"length": length, "total_length": 3 * length, "width": math.nan,
                "opening": math.nan, "feasible": False, "status": f"error: {exc}"}
    return {"length": length, "total_length": rep.extras["link"].total_length,
            "width": rep.final_values.get("linewidth", math.nan),
            "opening": rep.final_opening, "feasible": rep.extras["feasible"],
            "status": "ok" if rep.extras["feasible"] else "infeasible"}


def check_monotone(widths, slack=2e-6) -> bool:
    """Non-decreasing, tolerating one inversion of at most ``slack``."""
    w = [x for x in widths if not math.isnan(x)]
    drops = [a - b for a, b in zip(w, w[1:]) if b < a]
    return len(drops) == 0 or (len(drops) == 1 and drops[0] <= slack)


def run_length_sweep(cfg: StudyConfig, lengths=None) -> StudyReport:
    lengths = tuple(lengths if lengths is not None
                    else cfg.option("lengths", DEFAULT_LENGTHS))
    if len(lengths) < 2:
        raise StudyError("a sweep needs at least two lengths")
    ir = load_ir(cfg)
    cap = max(ir.params["linewidth"].max, 0) if "linewidth" in ir.params else math.inf
    jobs = [(cfg, float(L)) for L in lengths]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    rep = StudyReport("length-sweep", sweep_rows=rows)
    widths = [r["width"] for r in rows]
    order = np.argsort(lengths, kind="stable")
    sorted_w = [widths[i] for i in order]
    monotone = check_monotone(sorted_w)
    longest = rows[int(order[-1])]
    plateau = abs(longest["width"] - cap) <= 0.01 * cap
    rep.checks = {"widths non-decreasing with length": monotone,
                  "longest length at the width cap": plateau}
    for r in rows:
        if not r["feasible"]:
            rep.notes.append(f"length {r['length']:.3f} m: {r['status']}")
    if plateau:
        rep.notes.append("plateau at the width cap for the longest length")
    rep.extras["cap"] = cap
    return rep


def count_maxima(values) -> int:
    """Strict circular local maxima, flat tops counted once."""
    v = np.asarray(values, dtype=float)
    # collapse runs of equal values
    keep = np.r_[True, v[1:] != v[:-1]]
    u = v[keep]
    if u.size > 1 and u[0] == u[-1]:
        u = u[:-1]
    if u.size < 3:
        return int(u.size > 1)
    left, right = np.roll(u, 1), np.roll(u, -1)
    return int(np.sum((u > left) & (u > right)))


def sweep_mask_delay(cfg: StudyConfig, n_points: int = 64, width=None) -> StudyReport:
    """AVG masked opening against mask delay over two bit periods."""
    if n_points < 8 or n_points % 2:
        raise StudyError("n_points must be an even count >= 8")
    ir = load_ir(cfg)
    env0 = ir.resolve(param_overrides(cfg))
    if width is not None:
        env0 = ir.resolve({**param_overrides(cfg), "linewidth": float(width)})
    T = env0["bit_period"]
    grid = _grid(cfg, ir.stages[0], T)
    prob = LinkProblem(ir, link_spec(cfg, T), grid, env0)
    delays = 2 * T * np.arange(n_points) / n_points
    avg = []
    for d in delays:
        env = ir.resolve({**param_overrides(cfg), "linewidth": env0["linewidth"],
                          "mask_delay": float(d)})
        avg.append(prob.measure(prob.avg_name, env=env))
    avg = np.array(avg)
    half = n_points // 2
    period_err = float(np.max(np.abs(avg[:half] - avg[half:])))
    rep = StudyReport("mask-delay-sweep")
    rep.curve = list(zip(delays.tolist(), avg.tolist()))
    n_max = count_maxima(avg)
    best = float(delays[int(np.argmax(avg))])
    env = ir.resolve({**param_overrides(cfg), "linewidth": env0["linewidth"],
                      "mask_delay": best})
    rep.extras.update(period_error=period_err, n_maxima=n_max, best_delay=best,
                      min_at_best=prob.measure(prob.min_name, env=env))
    tol = 1e-9 * max(1.0, float(np.max(np.abs(avg))))
    rep.checks = {"f(d) = f(d + T)": period_err <= tol, "two maxima": n_max == 2}
    return rep


def best_min_opening(cfg: StudyConfig, width: float, n_delays: int | None = None):
    """Best MIN masked opening over one bit period of mask delays at ``width``.

    The width is applied through the deck's scaled geometry, so values
    outside the OPT bounds are allowed here.  Returns ``(opening, delay)``.
    """
    ir = load_ir(cfg)
    env0 = ir.resolve(param_overrides(cfg))
    T = env0["bit_period"]
    grid = _grid(cfg, ir.stages[0], T)
    prob = LinkProblem(ir, link_spec(cfg, T), grid, env0)
    n = n_delays or 4 * grid.samples_per_bit
    best = (-math.inf, 0.0)
    for d in T * np.arange(n) / n:
        env = ir.resolve({**param_overrides(cfg), "linewidth": float(width),
                          "mask_delay": float(d)})
        best = max(best, (prob.measure(prob.min_name, env=env), float(d)))
    return best


def run_study(cfg: StudyConfig) -> StudyReport:
    if cfg.study == "multidrop":
        return run_multidrop(cfg)
    if cfg.study == "linkwidth":
        return run_linkwidth(cfg)
    return run_length_sweep(cfg)


__all__ = ["StudyConfig", "StudyReport", "StudyError", "run_multidrop", "run_linkwidth",
           "run_length_sweep", "sweep_mask_delay", "run_study", "load_ir", "link_spec",
           "multidrop_spec", "LinkProblem", "check_monotone", "count_maxima",
           "best_min_opening", "DEFAULT_LENGTHS"]
