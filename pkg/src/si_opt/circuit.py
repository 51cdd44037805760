"""Time-domain nodal simulation with ideal transmission lines.

Resistors stamp conductances, capacitors use the trapezoidal companion
model and lossless lines use the method of characteristics (Bergeron): a
``1/Z0`` conductance at each end plus a history current built from the far
end's voltage and current one line delay earlier.  Voltage sources are
handled with modified nodal analysis.  The system matrix is constant, so
it is inverted once and each step is a matrix-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numba
import numpy as np

from .sources import Dc, Prbs, SourceKind, eval_source
from .waveform import Waveform

GROUND = "0"
GMIN = 1e-12


class CircuitError(ValueError):
    pass


class SingularCircuitError(CircuitError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


Value = Union[float, str]


@dataclass(frozen=True)
class Resistor:
    name: str
    a: str
    b: str
    ohms: Value


@dataclass(frozen=True)
class Capacitor:
    name: str
    a: str
    b: str
    farads: Value


@dataclass(frozen=True)
class TLine:
    name: str
    a: str
    b: str
    z0: Value
    delay: Value
    a_ref: str = GROUND
    b_ref: str = GROUND


@dataclass(frozen=True)
class VSource:
    name: str
    p: str
    n: str
    kind: SourceKind


Element = Union[Resistor, Capacitor, TLine, VSource]


@dataclass
class Netlist:
    elements: list = field(default_factory=list)
    ground: str = GROUND

    def add(self, element):
        if any(e.name == element.name for e in self.elements):
            raise CircuitError(f"duplicate element {element.name!r}")
        self.elements.append(element)
        return element

    @property
    def nodes(self) -> list[str]:
        seen = {}
        for e in self.elements:
            for n in _terminals(e):
                seen.setdefault(n, None)
        seen.pop(self.ground, None)
        return list(seen)

    def parameter_refs(self) -> set[str]:
        refs = set()
        for e in self.elements:
            for v in _values(e):
                if isinstance(v, str):
                    refs.add(v)
        return refs


def _terminals(e):
    if isinstance(e, TLine):
        return (e.a, e.a_ref, e.b, e.b_ref)
    if isinstance(e, VSource):
        return (e.p, e.n)
    return (e.a, e.b)


def _values(e):
    if isinstance(e, Resistor):
        return (e.ohms,)
    if isinstance(e, Capacitor):
        return (e.farads,)
    if isinstance(e, TLine):
        return (e.z0, e.delay)
    return ()


def _resolve(v, params, owner):
    if isinstance(v, str):
        if v not in params:
            raise CircuitError(f"{owner}: unbound parameter {v!r}")
        return float(params[v])
    return float(v)


def _check_connected(netlist):
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        parent[find(a)] = find(b)

    find(netlist.ground)
    for e in netlist.elements:
        if isinstance(e, TLine):
            union(e.a, e.a_ref)
            union(e.b, e.b_ref)
            union(e.a, e.b)
        else:
            t = _terminals(e)
            union(t[0], t[1])
    root = find(netlist.ground)
    for node in netlist.nodes:
        if find(node) != root:
            raise SingularCircuitError(f"node {node!r} has no path to ground", node)


@numba.njit(cache=True)
def _march(minv, src_rows, src_vals, port_p, port_n, port_g, port_pair, port_delay,
           x0, pv0, pi0, nsteps):
    nunk = minv.shape[0]
    nports = port_p.size
    xs = np.empty((nsteps, nunk))
    pv = np.empty((nsteps, nports))
    pi = np.empty((nsteps, nports))
    xs[0, :] = x0
    pv[0, :] = pv0
    pi[0, :] = pi0
    rhs = np.empty(nunk)
    hist = np.empty(nports)
    for n in range(1, nsteps):
        rhs[:] = 0.0
        for s in range(src_rows.size):
            rhs[src_rows[s]] = src_vals[s, n]
        for k in range(nports):
            m = port_pair[k]
            if m < 0:
                # capacitor: trapezoidal companion history
                h = port_g[k] * pv[n - 1, k] + pi[n - 1, k]
            else:
                j = n - port_delay[k]
                if j < 0:
                    j = 0
                h = port_g[k] * pv[j, m] + pi[j, m]
            hist[k] = h
            if port_p[k] >= 0:
                rhs[port_p[k]] += h
            if port_n[k] >= 0:
                rhs[port_n[k]] -= h
        for i in range(nunk):
            acc = 0.0
            for j in range(nunk):
                acc += minv[i, j] * rhs[j]
            xs[n, i] = acc
        for k in range(nports):
            v = 0.0
            if port_p[k] >= 0:
                v += xs[n, port_p[k]]
            if port_n[k] >= 0:
                v -= xs[n, port_n[k]]
            pv[n, k] = v
            pi[n, k] = port_g[k] * v - hist[k]
    return xs


def _stamp_g(mat, a, b, g):
    if a >= 0:
        mat[a, a] += g
    if b >= 0:
        mat[b, b] += g
    if a >= 0 and b >= 0:
        mat[a, b] -= g
        mat[b, a] -= g


def _stamp_branch(mat, row, a, b, sign_a=1.0):
    if a >= 0:
        mat[a, row] += sign_a
        mat[row, a] += sign_a
    if b >= 0:
        mat[b, row] -= sign_a
        mat[row, b] -= sign_a


def line_delay_steps(delay: float, tstep: float) -> int:
    """Line delay in whole time steps; rejects rounding errors above 5%."""
    steps = int(round(delay / tstep))
    if steps < 1:
        raise CircuitError(f"line delay {delay:g} s is shorter than the time step {tstep:g} s")
    if abs(steps * tstep - delay) > 0.05 * delay:
        raise CircuitError(f"line delay {delay:g} s is not close to a multiple of {tstep:g} s")
    return steps


def run_transient(netlist: Netlist, params: Mapping[str, float] | None,
                  tstep: float, tstop: float) -> dict[str, Waveform]:
    """Simulate ``netlist`` from its DC operating point at t=0 to ``tstop``.

    Returns a waveform per (non-ground) node, sampled every ``tstep``.
    """
    if not tstep > 0:
        raise CircuitError("tstep must be > 0")
    if not tstop > tstep:
        raise CircuitError("tstop must exceed tstep")
    params = params or {}
    _check_connected(netlist)
    nodes = netlist.nodes
    index = {n: i for i, n in enumerate(nodes)}
    index[netlist.ground] = -1
    nn = len(nodes)
    sources = [e for e in netlist.elements if isinstance(e, VSource)]
    lines = [e for e in netlist.elements if isinstance(e, TLine)]
    nsrc = len(sources)
    nunk = nn + nsrc

    gt = np.zeros((nunk, nunk))
    gdc = np.zeros((nunk + len(lines), nunk + len(lines)))
    for i in range(nn):
        gdc[i, i] += GMIN
    port_p, port_n, port_g, port_pair, port_delay = [], [], [], [], []
    for e in netlist.elements:
        if isinstance(e, Resistor):
            r = _resolve(e.ohms, params, e.name)
            if not r > 0:
                raise CircuitError(f"{e.name}: resistance must be > 0")
            for mat in (gt, gdc):
                _stamp_g(mat, index[e.a], index[e.b], 1.0 / r)
        elif isinstance(e, Capacitor):
            c = _resolve(e.farads, params, e.name)
            if c < 0:
                raise CircuitError(f"{e.name}: capacitance must be >= 0")
            if c == 0:
                continue
            g = 2.0 * c / tstep
            _stamp_g(gt, index[e.a], index[e.b], g)
            port_p.append(index[e.a])
            port_n.append(index[e.b])
            port_g.append(g)
            port_pair.append(-1)
            port_delay.append(0)
        elif isinstance(e, TLine):
            z0 = _resolve(e.z0, params, e.name)
            td = _resolve(e.delay, params, e.name)
            if not z0 > 0 or not td > 0:
                raise CircuitError(f"{e.name}: Z0 and delay must be > 0")
            steps = line_delay_steps(td, tstep)
            g = 1.0 / z0
            k = len(port_p)
            for (a, b, pair) in ((e.a, e.a_ref, k + 1), (e.b, e.b_ref, k)):
                _stamp_g(gt, index[a], index[b], g)
                port_p.append(index[a])
                port_n.append(index[b])
                port_g.append(g)
                port_pair.append(pair)
                port_delay.append(steps)
    for s, e in enumerate(sources):
        for mat in (gt, gdc):
            _stamp_branch(mat, nn + s, index[e.p], index[e.n])
    for ell, e in enumerate(lines):
        row = nunk + ell
        _stamp_branch(gdc, row, index[e.a], index[e.a_ref])
        ia, ib = index[e.b], index[e.b_ref]
        if ia >= 0:
            gdc[ia, row] -= 1.0
            gdc[row, ia] -= 1.0
        if ib >= 0:
            gdc[ib, row] += 1.0
            gdc[row, ib] += 1.0

    nsteps = int(round(tstop / tstep)) + 1
    t = tstep * np.arange(nsteps)
    src_vals = np.empty((nsrc, nsteps))
    for s, e in enumerate(sources):
        src_vals[s] = eval_source(e.kind, t)

    rhs_dc = np.zeros(gdc.shape[0])
    rhs_dc[nn:nunk] = src_vals[:, 0]
    try:
        xdc = np.linalg.solve(gdc, rhs_dc)
        minv = np.linalg.inv(gt)
    except np.linalg.LinAlgError:
        raise SingularCircuitError("singular nodal matrix") from None
    if not np.all(np.isfinite(minv)) or np.linalg.cond(gt) > 1e14:
        raise SingularCircuitError("singular nodal matrix")

    x0 = xdc[:nunk].copy()
    port_p = np.array(port_p, dtype=np.int64)
    port_n = np.array(port_n, dtype=np.int64)
    port_g = np.array(port_g, dtype=float)
    port_pair = np.array(port_pair, dtype=np.int64)
    port_delay = np.array(port_delay, dtype=np.int64)
    pv0 = np.zeros(port_p.size)
    for k in range(port_p.size):
        pv0[k] = (x0[port_p[k]] if port_p[k] >= 0 else 0.0) - (
            x0[port_n[k]] if port_n[k] >= 0 else 0.0)
    pi0 = np.zeros(port_p.size)
    ell = 0
    for k in range(port_p.size):
        # line ends come in (a, b) pairs in element order
        if port_pair[k] == k + 1:
            i_line = xdc[nunk + ell]
            pi0[k] = i_line
            pi0[k + 1] = -i_line
            ell += 1
    xs = _march(minv, np.arange(nn, nunk, dtype=np.int64), src_vals, port_p, port_n,
                port_g, port_pair, port_delay, x0, pv0, pi0, nsteps)
    return {n: Waveform(0.0, tstep, xs[:, i]) for n, i in index.items() if i >= 0}


# --------------------------------------------------------------------------
# Multi-drop bus topology
# --------------------------------------------------------------------------

SERIES_GROUPS = ("series_r_drvr", "series_r_primary", "series_r_stub")
SHUNT_GROUPS = ("shunt_r_drvr", "shunt_r_primary", "shunt_r_rcvr")
IMPEDANCE_GROUPS = ("z_primary", "z_stub")
ALL_GROUPS = (*SERIES_GROUPS, *SHUNT_GROUPS, *IMPEDANCE_GROUPS)


@dataclass(frozen=True)
class MultidropSpec:
    """Driver, bus geometry and termination options for the multi-drop net.

    Element placement (12 resistors, 7 lines for four loads):

    * driver pin -> ``series_r_drvr`` -> line input, ``shunt_r_drvr`` to VTT
      at the line input;
    * at each of the ``n_loads - 1`` splits the arriving primary segment
      meets ``shunt_r_primary`` (to VTT), ``series_r_primary`` (onward
      primary path) and ``series_r_stub`` (into the ``z_stub`` stub);
    * the last primary segment ends at the far receiver with
      ``shunt_r_rcvr`` to VTT.

    ``prune`` maps a group name to ``"short"`` (series groups) or
    ``"open"`` (shunt groups).
    """

    n_loads: int = 4
    primary_delay: float = 150e-12
    stub_delay: float = 50e-12
    bit_period: float = 1.2e-9
    prbs_order: int = 7
    prbs_seed: int = 0x7F
    v_low: float = 0.0
    v_high: float = 1.5
    edge: float = 200e-12
    r_source: float = 25.0
    vtt: float = 0.75
    c_rcvr: float = 3e-12
    prune: tuple = ()

    @property
    def prune_map(self) -> dict[str, str]:
        return dict(self.prune)

    def with_prune(self, decisions: Mapping[str, str]) -> "MultidropSpec":
        merged = self.prune_map
        merged.update({k: v for k, v in decisions.items() if v in ("short", "open")})
        return MultidropSpec(**{**self.__dict__, "prune": tuple(sorted(merged.items()))})

    def driver(self) -> Prbs:
        return Prbs(self.prbs_order, self.prbs_seed, self.bit_period, self.v_low,
                    self.v_high, self.edge, self.edge)

    def receivers(self) -> list[str]:
        return [f"rcv{k}" for k in range(1, self.n_loads + 1)]


def _check_prune(prune):
    for group, action in prune.items():
        if group in SERIES_GROUPS:
            if action != "short":
                raise CircuitError(f"series group {group!r} can only be pruned to a short")
        elif group in SHUNT_GROUPS:
            if action != "open":
                raise CircuitError(f"shunt group {group!r} can only be pruned to an open")
        else:
            raise CircuitError(f"group {group!r} cannot be pruned")


def build_multidrop(topology: MultidropSpec, params: Mapping[str, float] | None = None
                    ) -> Netlist:
    """Kitchen-sink multi-drop netlist with grouped element values.

    Resistor and impedance values are left as references to the eight group
    names so one :class:`Netlist` serves every optimizer iteration.  Pruned
    series groups merge their nodes; pruned shunt groups are removed.
    ``params`` is only used to validate that each surviving group is bound.
    """
    if topology.n_loads < 1:
        raise CircuitError("need at least one load")
    prune = topology.prune_map
    _check_prune(prune)
    alias = {}

    def node(name):
        while name in alias:
            name = alias[name]
        return name

    raw = []

    def series(name, group, a, b):
        if prune.get(group) == "short":
            alias[b] = a
        else:
            raw.append(("R", name, a, b, group))

    def shunt(name, group, a):
        if prune.get(group) != "open":
            raw.append(("R", name, a, "vtt", group))

    series("r_drvr", "series_r_drvr", "drv", "p0")
    shunt("r_drvr_sh", "shunt_r_drvr", "p0")
    start = "p0"
    receivers = topology.receivers()
    n_splits = topology.n_loads - 1
    for k in range(1, n_splits + 1):
        arrive = f"s{k}"
        raw.append(("T", f"t_pri{k}", start, arrive, "z_primary", topology.primary_delay))
        shunt(f"r_pri{k}_sh", "shunt_r_primary", arrive)
        series(f"r_pri{k}", "series_r_primary", arrive, f"s{k}p")
        series(f"r_stub{k}", "series_r_stub", arrive, f"s{k}s")
        raw.append(("T", f"t_stub{k}", f"s{k}s", receivers[k - 1], "z_stub",
                    topology.stub_delay))
        start = f"s{k}p"
    far = receivers[-1]
    raw.append(("T", f"t_pri{n_splits + 1}", start, far, "z_primary", topology.primary_delay))
    shunt("r_rcvr_sh", "shunt_r_rcvr", far)

    net = Netlist()
    net.add(VSource("v_drv", "drv_emf", GROUND, topology.driver()))
    net.add(Resistor("r_src", "drv_emf", "drv", topology.r_source))
    net.add(VSource("v_tt", "vtt", GROUND, Dc(topology.vtt)))
    for item in raw:
        if item[0] == "R":
            _, name, a, b, group = item
            net.add(Resistor(name, node(a), node(b), group))
        else:
            _, name, a, b, group, delay = item
            net.add(TLine(name, node(a), node(b), group, delay))
    for r in receivers:
        if topology.c_rcvr > 0:
            net.add(Capacitor(f"c_{r}", node(r), GROUND, topology.c_rcvr))
    if params is not None:
        missing = net.parameter_refs() - set(params)
        if missing:
            raise CircuitError(f"unbound multi-drop group(s): {sorted(missing)}")
    return net
