"""Bounded optimization with a relative error function.

Each measured result is turned into ``ERRfun = (GOAL - result) / GOAL`` and
the sum of squares is minimized with a finite-difference Levenberg-Marquardt
iteration in normalized coordinates.  Eye-opening measures are only
piecewise smooth, so after three non-improving LM steps the search falls back
to a shrinking coordinate (pattern) search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .deck import OptModelDecl
from .units import format_eng


class OptimizeError(RuntimeError):
    pass


class ObjectiveError(OptimizeError):
    """The objective raised; ``assignment`` holds the offending point."""

    def __init__(self, message, assignment):
        super().__init__(message)
        self.assignment = dict(assignment)


@dataclass
class OptVariable:
    name: str
    init: float
    min: float
    max: float
    current: float | None = None

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError(f"{self.name}: need min < max")
        if not self.min <= self.init <= self.max:
            raise ValueError(f"{self.name}: init outside [min, max]")
        if self.current is None:
            self.current = self.init
        if not self.min <= self.current <= self.max:
            raise ValueError(f"{self.name}: current value outside [min, max]")

    @property
    def log_scaled(self) -> bool:
        # resistor-like ranges spanning a decade or more are searched in log space
        return self.min > 0 and self.max / self.min >= 10

    def to_unit(self, x: float) -> float:
        if self.log_scaled:
            return math.log(x / self.min) / math.log(self.max / self.min)
        return (x - self.min) / (self.max - self.min)

    def from_unit(self, u: float) -> float:
        u = min(1.0, max(0.0, u))
        if self.log_scaled:
            x = self.min * (self.max / self.min) ** u
        else:
            x = self.min + u * (self.max - self.min)
        return min(self.max, max(self.min, x))


@dataclass
class OptStageResult:
    values: dict
    norm_sensitivity_pct: dict
    iterations: int
    converged: bool
    final_error: float
    status: str = ""
    at_bounds: tuple = ()
    result: object = None
    n_evals: int = 0
    name: str = ""
    failed: bool = False


def err_fun(goal: float, result: float) -> float:
    """Relative miss ``(goal - result) / goal``."""
    if goal == 0:
        raise OptimizeError("GOAL=0 would divide by zero in (GOAL - result)/GOAL; "
                            "use a small nonzero goal such as 1e-5 instead")
    return (goal - result) / goal


@dataclass
class _Problem:
    objective: Callable
    variables: list
    goals: np.ndarray
    n_evals: int = 0
    cache: dict = field(default_factory=dict)

    def assignment(self, u) -> dict:
        return {v.name: v.from_unit(ui) for v, ui in zip(self.variables, u)}

    def results(self, u):
        key = tuple(np.round(np.asarray(u, dtype=float), 15))
        if key in self.cache:
            return self.cache[key]
        point = self.assignment(u)
        for v in self.variables:
            x = point[v.name]
            assert v.min <= x <= v.max, f"{v.name}={x} escaped [{v.min}, {v.max}]"
        try:
            out = self.objective(point)
        except Exception as exc:
            raise ObjectiveError(f"objective failed at {point}: {exc}", point) from exc
        self.n_evals += 1
        res = np.atleast_1d(np.asarray(out, dtype=float))
        if res.shape != self.goals.shape and self.goals.size != 1:
            raise OptimizeError("objective returned a different number of results than goals")
        if not np.all(np.isfinite(res)):
            raise ObjectiveError(f"objective returned non-finite value at {point}", point)
        self.cache[key] = res
        return res

    def residuals(self, u):
        res = self.results(u)
        return (self.goals - res) / self.goals

    def cost(self, u) -> float:
        r = self.residuals(u)
        return float(r @ r)


def _jacobian(prob: _Problem, u, h):
    r0 = prob.residuals(u)
    jac = np.zeros((r0.size, u.size))
    for i in range(u.size):
        up, dn = u.copy(), u.copy()
        up[i] = min(1.0, u[i] + h)
        dn[i] = max(0.0, u[i] - h)
        span = up[i] - dn[i]
        if span <= 0:
            continue
        jac[:, i] = (prob.residuals(up) - prob.residuals(dn)) / span
    return r0, jac


def _coordinate_search(prob: _Problem, u, cost, step, min_step):
    """Pattern search along each axis; returns (u, cost, step, improved)."""
    while step >= min_step:
        improved = False
        for i in range(u.size):
            for sign in (1.0, -1.0):
                trial = u.copy()
                trial[i] = min(1.0, max(0.0, u[i] + sign * step))
                if trial[i] == u[i]:
                    continue
                c = prob.cost(trial)
                if c < cost:
                    u, cost, improved = trial, c, True
                    break
        if improved:
            return u, cost, step, True
        step *= 0.5
    return u, cost, step, False


def minimize(objective: Callable[[dict], object], variables: Sequence[OptVariable],
             goal, model: OptModelDecl | None = None, name: str = "",
             sensitivity: bool = True) -> OptStageResult:
    """Drive the objective's result(s) toward ``goal`` inside the variable bounds.

    ``objective`` maps ``{name: value}`` to one measured result or a vector
    of results (one residual each, sharing or matching ``goal``).
    """
    if not variables:
        raise OptimizeError("nothing to optimize")
    model = model or OptModelDecl("default")
    goals = np.atleast_1d(np.asarray(goal, dtype=float))
    for g in goals:
        err_fun(g, 0.0)  # rejects a zero goal up front
    variables = [OptVariable(v.name, v.init, v.min, v.max, v.current) for v in variables]
    prob = _Problem(objective, variables, goals)

    u = np.array([v.to_unit(v.current) for v in variables])
    cost = prob.cost(u)
    lam = 1e-3
    h = max(min(model.close, 0.5), 1e-6)
    min_h = max(model.rel_param_tol * 1e-2, 1e-9)
    fails = 0
    small_changes = 0
    converged = False
    status = "max iterations reached"
    it = 0
    for it in range(1, model.max_iters + 1):
        if cost == 0.0:
            converged, status = True, "goal met exactly"
            break
        r, jac = _jacobian(prob, u, h)
        jtj = jac.T @ jac
        grad = jac.T @ r
        accepted = False
        for _ in range(8):
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-12)
            try:
                delta = -np.linalg.solve(a, grad)
            except np.linalg.LinAlgError:
                delta = -grad / (np.diag(a) + 1e-12)
            trial = np.clip(u + delta, 0.0, 1.0)
            if np.array_equal(trial, u):
                break
            c = prob.cost(trial)
            if c < cost:
                accepted = True
                lam = max(lam / 3.0, 1e-9)
                break
            lam *= 4.0
        if accepted:
            du = float(np.max(np.abs(trial - u)))
            rel_cost = (cost - c) / max(cost, 1e-300)
            u, cost = trial, c
            fails = 0
            h = max(min(h, 4 * du), min_h)
            if du < model.rel_param_tol:
                converged, status = True, "parameter change below RELIN"
                break
            small_changes = small_changes + 1 if rel_cost < model.rel_result_tol else 0
            if small_changes >= 2:
                converged, status = True, "result change below RELOUT"
                break
            continue
        fails += 1
        h = max(h * 0.5, min_h)
        if fails >= 3:
            u_new, c_new, step, improved = _coordinate_search(
                prob, u, cost, max(h, 4 * model.rel_param_tol), model.rel_param_tol)
            if not improved:
                converged, status = True, "no improving direction at RELIN resolution"
                break
            rel_cost = (cost - c_new) / max(cost, 1e-300)
            u, cost = u_new, c_new
            h = max(step, min_h)
            fails = 0
            lam = 1e-3
            if rel_cost < model.rel_result_tol:
                small_changes += 1
                if small_changes >= 2:
                    converged, status = True, "result change below RELOUT"
                    break
    values = prob.assignment(u)
    at_bounds = tuple(v.name for v in variables
                      if values[v.name] in (v.min, v.max))
    if converged and at_bounds:
        status += "; converged at bound: " + ", ".join(at_bounds)
    res = prob.results(u)
    out = OptStageResult(values, {}, it, converged, cost, status, at_bounds,
                         float(res[0]) if res.size == 1 else res.copy(),
                         prob.n_evals, name)
    if sensitivity:
        out.norm_sensitivity_pct = normalized_sensitivity(objective, out, variables)
        out.n_evals = prob.n_evals + len(variables)
    return out


def normalized_sensitivity(objective, result: OptStageResult,
                           variables: Sequence[OptVariable], rel_step: float = 0.01
                           ) -> dict:
    """Percent share of |dm/m| / |dp/p| for a 1 % perturbation at the optimum."""
    base = result.values
    m0 = np.atleast_1d(np.asarray(objective(dict(base)), dtype=float))
    m0n = float(np.linalg.norm(m0))
    raw = {}
    for v in variables:
        p = base[v.name]
        dp = rel_step * (abs(p) if p != 0 else (v.max - v.min))
        p_new = p + dp if p + dp <= v.max else p - dp
        p_new = min(v.max, max(v.min, p_new))
        if p_new == p:
            raw[v.name] = 0.0
            continue
        m1 = np.atleast_1d(np.asarray(objective({**base, v.name: p_new}), dtype=float))
        dm = float(np.linalg.norm(m1 - m0))
        rel_m = dm / m0n if m0n > 0 else dm
        rel_p = abs(p_new - p) / abs(p) if p != 0 else abs(p_new - p) / (v.max - v.min)
        raw[v.name] = rel_m / rel_p
    total = sum(raw.values())
    if total == 0:
        return {k: 0.0 for k in raw}
    return {k: 100.0 * r / total for k, r in raw.items()}


def run_sequence(stages, ir, evaluate: Callable, seeders: Mapping | None = None,
                 start: Mapping | None = None) -> list[OptStageResult]:
    """Run IR stages in order, carrying optimized values forward.

    ``evaluate(env, stage)`` returns the stage measure's result(s) for a
    fully resolved parameter environment.  ``seeders`` maps a group name to
    ``f(variables, objective) -> {name: start}`` used before local search.
    """
    current = dict(start or {})
    out = []
    for stage in stages:
        try:
            variables = ir.variables(stage.group, current)

            def objective(assign, stage=stage):
                return evaluate(ir.resolve({**current, **assign}), stage)

            if seeders and stage.group in seeders:
                seeded = seeders[stage.group](variables, objective)
                variables = [OptVariable(v.name, v.init, v.min, v.max,
                                         min(v.max, max(v.min, seeded.get(v.name, v.current))))
                             for v in variables]
            goal = ir.measures[stage.measure].goal
            if goal is None:
                raise OptimizeError(f"measure {stage.measure!r} declares no GOAL")
            res = minimize(objective, variables, goal, ir.models[stage.model],
                           name=f"stage{stage.index + 1}:{stage.group}")
        except Exception as exc:
            out.append(OptStageResult(dict(current), {}, 0, False, math.inf,
                                      f"failed: {exc}", name=f"stage{stage.index + 1}",
                                      failed=True))
            break
        current.update(res.values)
        out.append(res)
    return out


@dataclass(frozen=True)
class PruneRule:
    role: str
    short_threshold: float
    open_threshold: float

    def __post_init__(self):
        if self.role not in ("series", "shunt"):
            raise ValueError("prune role must be 'series' or 'shunt'")
        if not self.short_threshold < self.open_threshold:
            raise ValueError("short_threshold must be below open_threshold")

    @classmethod
    def from_bounds(cls, role, lo, hi):
        return cls(role, 2 * lo, hi / 2)

    def decide(self, value: float) -> str:
        if self.role == "series" and value <= self.short_threshold:
            return "short"
        if self.role == "shunt" and value >= self.open_threshold:
            return "open"
        return "keep"


def prune_topology(values, rules: Mapping[str, PruneRule],
                   previous: Mapping[str, str] | None = None) -> dict[str, str]:
    """Decide ``short`` / ``open`` / ``keep`` per element group.

    Groups already pruned in ``previous`` stay pruned, so re-applying the
    rules to a pruned map changes nothing.
    """
    if isinstance(values, OptStageResult):
        values = values.values
    out = dict(previous or {})
    for group, rule in rules.items():
        if out.get(group) in ("short", "open"):
            continue
        if group in values:
            out[group] = rule.decide(float(values[group]))
        else:
            out.setdefault(group, "keep")
    return out


E24 = (1.0, 1.1, 1.2, 1.3, 1.5, 1.6, 1.8, 2.0, 2.2, 2.4, 2.7, 3.0,
       3.3, 3.6, 3.9, 4.3, 4.7, 5.1, 5.6, 6.2, 6.8, 7.5, 8.2, 9.1)


def nearest_e24(x: float) -> float:
    if x <= 0:
        raise ValueError("E24 rounding needs a positive value")
    dec = math.floor(math.log10(x))
    cands = [m * 10.0 ** d for d in (dec - 1, dec, dec + 1) for m in E24]
    best = min(cands, key=lambda c: (abs(c - x), c))
    return float(f"{best:.3g}")


def value_kind(name: str) -> str | None:
    n = name.lower()
    if n.startswith("z_") or "impedance" in n:
        return "impedance"
    if "_r_" in n or n.startswith("r_"):
        return "resistor"
    return None


def round_practical(values: Mapping[str, float], kinds: Mapping[str, str] | None = None
                    ) -> dict[str, float]:
    """Resistors to the nearest E24 value, impedances to the nearest ohm."""
    out = {}
    for name, x in values.items():
        kind = (kinds or {}).get(name, value_kind(name))
        if kind == "resistor":
            out[name] = nearest_e24(x)
        elif kind == "impedance":
            out[name] = float(round(x))
        else:
            out[name] = x
    return out


def format_table(result: OptStageResult) -> str:
    """Two-column ``.param`` table: value and %norm-sen, engineering notation."""
    lines = ["\tvalue\t%norm-sen"]
    for name, value in result.values.items():
        pct = result.norm_sensitivity_pct.get(name, 0.0)
        lines.append(f".param {name[:14]:<14}=\t{format_eng(value)}\t{format_eng(pct)}")
    return "\n".join(lines) + "\n"


def write_table_csv(path, result: OptStageResult) -> Path:
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        fh.write("name,value,norm_sensitivity_pct\n")
        for name, value in result.values.items():
            pct = result.norm_sensitivity_pct.get(name, 0.0)
            fh.write(f"{name},{float(value)!r},{float(pct)!r}\n")
    return path
