"""Microgrid interconnection model.

Buses carry angle-tracking/droop control parameters and dispatch setpoints;
branches carry impedances.  From these the module assembles:

  * the Lur'e state-space form  ddelta/dt = A*delta + B'*phi0(C'*delta)
    of the angle deviation dynamics over the canonical (half) edge set,
  * the generalized sector confining each phi0 component between two cubic
    polynomial bounds on a bounded angle-difference window,
  * equilibria via angle-only Newton-Raphson power flow.

Angles are radians, impedances and power per unit.  Branch angle convention:
theta = atan2(X, R), the impedance angle, so R = cos(theta)/Y and
X = sin(theta)/Y with Y = 1/|Z|; a lossless inductive line has theta = pi/2
and sector center y* = delta_i* - delta_k*.  Negative reactance flips theta
to -pi/2, which shifts y* by pi and thereby the coupling sign; kappa stays
positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .poly import Monomial, Polynomial, PolyVector, VariableRegistry


class NetworkError(ValueError):
    pass


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    T_a: float  # angle tracking time constant (s); sign unconstrained, nonzero
    D_a: float  # angle droop gain (rad / p.u. power)
    V_star: float  # voltage setpoint (p.u.)
    delta_star: Optional[float] = None  # angle setpoint (rad)
    P_star: Optional[float] = None  # real-power setpoint (p.u.)
    B_self: float = 0.0  # self-susceptance; parsed, unused (voltage dynamics out of scope)

    def __post_init__(self):
        if self.V_star <= 0:
            raise NetworkError(f"bus {self.id}: V_star must be positive")
        if self.T_a == 0:
            raise NetworkError(f"bus {self.id}: T_a must be nonzero")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    R: float
    X: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: self-loop")
        if self.X == 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: X must be nonzero")

    @property
    def Y(self) -> float:
        return 1.0 / math.hypot(self.R, self.X)

    @property
    def theta(self) -> float:
        return math.atan2(self.X, self.R)

    @property
    def lossless(self) -> bool:
        return self.R == 0.0


class MicrogridNetwork:
    """Immutable interconnection with resolved setpoints and derived edge data.

    Setpoint provenance: if every bus supplies delta_star, P_star is derived
    by forward evaluation of the power-flow equations; otherwise every
    non-slack bus must supply P_star and delta_star is solved by power flow
    (slack angle fixed, defaulting to 0).
    """

    def __init__(self, buses: Sequence[Bus], branches: Sequence[Branch], slack: int):
        self.buses = tuple(buses)
        self.branches = tuple(branches)
        self.slack = slack
        if not self.buses:
            raise NetworkError("network has no buses")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        self.index = {b.id: i for i, b in enumerate(self.buses)}
        if slack not in self.index:
            raise NetworkError(f"slack bus {slack} not present")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self.index:
                    raise NetworkError(f"branch references unknown bus {end}")

        comps = _components(len(self.buses), [
            (self.index[br.from_bus], self.index[br.to_bus]) for br in self.branches
        ])
        if len(comps) > 1:
            named = [[self.buses[i].id for i in comp] for comp in comps]
            raise NetworkError(f"network is disconnected; components: {named}")

        self.n = len(self.buses)
        self.T_a = np.array([b.T_a for b in self.buses])
        self.D_a = np.array([b.D_a for b in self.buses])
        self.V_star = np.array([b.V_star for b in self.buses])
        self.lossless = all(br.lossless for br in self.branches)

        # canonical half edge set: from <= to by bus id
        edges = []
        for br in self.branches:
            i, k = br.from_bus, br.to_bus
            if i > k:
                i, k = k, i
            edges.append((self.index[i], self.index[k], br))
        edges.sort(key=lambda e: (self.buses[e[0]].id, self.buses[e[1]].id))
        self.edges0 = tuple((i, k) for i, k, _ in edges)
        self.m = len(self.edges0)
        self.kappa = np.array(
            [self.V_star[i] * self.V_star[k] * br.Y for i, k, br in edges]
        )
        self.theta = np.array([br.theta for _, _, br in edges])

        self.Cp = np.zeros((self.m, self.n))
        for j, (i, k) in enumerate(self.edges0):
            self.Cp[j, i] = 1.0
            self.Cp[j, k] = -1.0

        self._resolve_setpoints()
        # sector centers y*_e = delta_i* - delta_k* + pi/2 - theta
        self.y_star = self.Cp @ self.delta_star + math.pi / 2 - self.theta

    # -- setpoints -----------------------------------------------------------

    def _resolve_setpoints(self) -> None:
        have_delta = all(b.delta_star is not None for b in self.buses)
        if have_delta:
            self.delta_star = np.array([float(b.delta_star) for b in self.buses])
            self.P_star = self.injections(self.delta_star)
            return
        missing_p = [b.id for b in self.buses if b.P_star is None and b.id != self.slack]
        if missing_p:
            raise NetworkError(
                f"buses {missing_p} have neither delta_star nor P_star"
            )
        slack_bus = self.buses[self.index[self.slack]]
        slack_angle = slack_bus.delta_star if slack_bus.delta_star is not None else 0.0
        p = np.array(
            [0.0 if b.P_star is None else float(b.P_star) for b in self.buses]
        )
        self.P_star = p
        self.delta_star = _newton_power_flow(self, p, self.index[self.slack], slack_angle)
        self.P_star = self.injections(self.delta_star)

    def injections(self, delta: np.ndarray) -> np.ndarray:
        """Real-power injections at fixed nominal voltages."""
        p = np.zeros(self.n)
        for j, (i, k) in enumerate(self.edges0):
            # sin(d_i - d_k - theta + pi/2); theta = pi/2 gives kappa*sin(d_i - d_k)
            arg = delta[i] - delta[k] - self.theta[j] + math.pi / 2
            flow = self.kappa[j] * math.sin(arg)
            p[i] += flow
            arg_rev = delta[k] - delta[i] - self.theta[j] + math.pi / 2
            p[k] += self.kappa[j] * math.sin(arg_rev)
        return p

    # -- reconfiguration -----------------------------------------------------

    def with_parameters(
        self,
        bus_updates: Mapping[int, Mapping[str, float]] | None = None,
        branch_X: Mapping[tuple[int, int], float] | None = None,
    ) -> "MicrogridNetwork":
        """New network with updated tunables; P* held fixed, delta* re-solved.

        The slack keeps its angle setpoint so the re-dispatched equilibrium is
        anchored; every other bus hands its resolved P* to the power flow.
        """
        bus_updates = bus_updates or {}
        branch_X = branch_X or {}
        new_buses = []
        for i, b in enumerate(self.buses):
            upd = dict(bus_updates.get(b.id, {}))
            is_slack = b.id == self.slack
            new_buses.append(
                Bus(
                    id=b.id,
                    T_a=float(upd.get("T_a", b.T_a)),
                    D_a=float(upd.get("D_a", b.D_a)),
                    V_star=b.V_star,
                    delta_star=float(self.delta_star[i]) if is_slack else None,
                    P_star=float(self.P_star[i]),
                    B_self=b.B_self,
                )
            )
        new_branches = []
        for br in self.branches:
            key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
            x = float(branch_X.get(key, br.X))
            new_branches.append(Branch(br.from_bus, br.to_bus, br.R, x))
        return MicrogridNetwork(new_buses, new_branches, self.slack)

    @staticmethod
    def from_dict(cfg: Mapping) -> "MicrogridNetwork":
        buses = [
            Bus(
                id=int(b["id"]),
                T_a=float(b["T_a"]),
                D_a=float(b["D_a"]),
                V_star=float(b["V_star"]),
                delta_star=None if b.get("delta_star") is None else float(b["delta_star"]),
                P_star=None if b.get("P_star") is None else float(b["P_star"]),
                B_self=float(b.get("B_self", 0.0)),
            )
            for b in cfg["buses"]
        ]
        branches = [
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                R=float(br.get("R", 0.0)),
                X=float(br["X"]),
            )
            for br in cfg["branches"]
        ]
        return MicrogridNetwork(buses, branches, slack=int(cfg["slack"]))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "buses": [
                {
                    "id": b.id,
                    "T_a": float(self.T_a[i]),
                    "D_a": float(self.D_a[i]),
                    "V_star": float(self.V_star[i]),
                    "delta_star": float(self.delta_star[i]),
                    "P_star": float(self.P_star[i]),
                }
                for i, b in enumerate(self.buses)
            ],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "R": br.R, "X": br.X}
                for br in self.branches
            ],
            "slack": self.slack,
        }


def _components(n: int, edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, k in edges:
        adj[i].append(k)
        adj[k].append(i)
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(sorted(comp))
    return comps


# ---------------------------------------------------------------------------
# islanding
# ---------------------------------------------------------------------------


def island(net: MicrogridNetwork, removed: Iterable[int]) -> MicrogridNetwork:
    """Remove the given buses and all incident branches.

    Surviving buses keep their angle setpoints; P* is re-derived on the
    reduced topology (the removed lines carried part of the old dispatch).
    """
    removed = set(removed)
    unknown = removed - set(net.index)
    if unknown:
        raise NetworkError(f"cannot island unknown buses {sorted(unknown)}")
    keep = [b for b in net.buses if b.id not in removed]
    if not keep:
        raise NetworkError("islanding removed every bus")
    if net.slack in removed:
        raise NetworkError(f"islanding removed the slack bus {net.slack}")
    buses = [
        Bus(
            id=b.id,
            T_a=b.T_a,
            D_a=b.D_a,
            V_star=b.V_star,
            delta_star=float(net.delta_star[net.index[b.id]]),
            P_star=None,
            B_self=b.B_self,
        )
        for b in keep
    ]
    branches = [
        br
        for br in net.branches
        if br.from_bus not in removed and br.to_bus not in removed
    ]
    return MicrogridNetwork(buses, branches, net.slack)


# ---------------------------------------------------------------------------
# state space (Eqs. of the reduced Lur'e form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray  # n x n diagonal, -1/T_a
    Bp: np.ndarray  # n x m, column per canonical edge
    Cp: np.ndarray  # m x n incidence rows (+1 at from, -1 at to)
    edge_offsets: np.ndarray  # y*_e per canonical edge
    edge_gains: np.ndarray  # kappa_e

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.Bp.shape[1] if self.Bp.size else 0

    def phi(self, y: np.ndarray) -> np.ndarray:
        return np.sin(y + self.edge_offsets) - np.sin(self.edge_offsets)

    def vector_field(self, delta: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return self.A @ delta
        return self.A @ delta + self.Bp @ self.phi(self.Cp @ delta)

    def origin_jacobian(self) -> np.ndarray:
        if self.m == 0:
            return self.A.copy()
        return self.A + self.Bp @ np.diag(np.cos(self.edge_offsets)) @ self.Cp


def build_state_space(net: MicrogridNetwork) -> StateSpace:
    """Assemble A, B' = D X K F and C' for the deviation dynamics."""
    if not net.lossless:
        lossy = [
            f"{br.from_bus}-{br.to_bus}" for br in net.branches if not br.lossless
        ]
        raise NetworkError(
            "lossless network required (the half-edge reduction needs "
            f"phi(y_e0) = -phi(y_e1)); lossy branches: {lossy}"
        )
    A = np.diag(-1.0 / net.T_a)
    D = -net.D_a / net.T_a
    Bp = np.zeros((net.n, net.m))
    for j, (i, k) in enumerate(net.edges0):
        Bp[i, j] = D[i] * net.kappa[j]
        Bp[k, j] = -D[k] * net.kappa[j]
    return StateSpace(A, Bp, net.Cp.copy(), net.y_star.copy(), net.kappa.copy())


def unreduced_model(net: MicrogridNetwork):
    """Full directed-edge model (both orientations), for cross-validation.

    Returns (A, B, C, y_star_full) with edge order E0 then E1.
    """
    if not net.lossless:
        raise NetworkError("lossless network required")
    A = np.diag(-1.0 / net.T_a)
    D = -net.D_a / net.T_a
    m2 = 2 * net.m
    B = np.zeros((net.n, m2))
    C = np.zeros((m2, net.n))
    y_star = np.zeros(m2)
    for j, (i, k) in enumerate(net.edges0):
        # forward orientation (i, k)
        B[i, j] = D[i] * net.kappa[j]
        C[j, i], C[j, k] = 1.0, -1.0
        y_star[j] = net.y_star[j]
        # reverse orientation (k, i)
        B[k, net.m + j] = D[k] * net.kappa[j]
        C[net.m + j, k], C[net.m + j, i] = 1.0, -1.0
        y_star[net.m + j] = (
            net.delta_star[k] - net.delta_star[i] + math.pi / 2 - net.theta[j]
        )
    return A, B, C, y_star


# ---------------------------------------------------------------------------
# generalized sector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridVariables:
    registry: VariableRegistry
    delta: tuple[int, ...]
    phi: tuple[int, ...]
    y: tuple[int, ...]


def make_variables(net: MicrogridNetwork) -> GridVariables:
    reg = VariableRegistry()
    delta = tuple(reg.add(f"d{b.id}") for b in net.buses)
    phi = tuple(
        reg.add(f"phi_e{j + 1}") for j in range(net.m)
    )
    y = tuple(reg.add(f"y_e{j + 1}") for j in range(net.m))
    return GridVariables(reg, delta, phi, y)


@dataclass(frozen=True)
class SectorModel:
    variables: GridVariables
    r: PolyVector  # per-edge sector product in (phi_e, delta)
    a: PolyVector  # per-edge domain quadratic in delta
    eta1: tuple[Polynomial, ...]  # cubic lower/upper bounds in the edge's y-variable
    eta2: tuple[Polynomial, ...]
    y_star: np.ndarray
    intervals: tuple[tuple[float, float], ...]  # feasible y-window per edge


def sector_bounds(y_star: float, y_var: int) -> tuple[Polynomial, Polynomial]:
    """Cubic bounds on phi(y) = sin(y + y*) - sin(y*) for y + y* in [-pi, pi]."""
    u = Polynomial.linear({y_var: 1.0}, y_star)
    shift = Polynomial.constant(math.sin(y_star))
    eta1 = u - (1.0 / 6.0) * u**3 - shift
    eta2 = u - (1.0 / 10.0) * u**3 - shift
    return eta1, eta2


def phi_true(y, y_star: float):
    return np.sin(np.asarray(y) + y_star) - math.sin(y_star)


def build_sector(net: MicrogridNetwork, ss: StateSpace, gv: GridVariables | None = None) -> SectorModel:
    gv = gv or make_variables(net)
    r_entries, a_entries, e1s, e2s, intervals = [], [], [], [], []
    delta_ids = list(gv.delta)
    for j in range(net.m):
        ystar = float(ss.edge_offsets[j])
        yv = gv.y[j]
        eta1, eta2 = sector_bounds(ystar, yv)
        phi = Polynomial.variable(gv.phi[j])
        r_y = (phi - eta1) * (phi - eta2)
        a_y = Polynomial.linear({yv: 1.0}, math.pi + ystar) * Polynomial.linear(
            {yv: 1.0}, -math.pi + ystar
        )
        row = [ss.Cp[j]]
        r_entries.append(r_y.substitute_linear(row, [yv], delta_ids))
        a_entries.append(a_y.substitute_linear(row, [yv], delta_ids))
        e1s.append(eta1)
        e2s.append(eta2)
        intervals.append((-math.pi - ystar, math.pi - ystar))
    return SectorModel(
        gv,
        PolyVector(r_entries),
        PolyVector(a_entries),
        tuple(e1s),
        tuple(e2s),
        ss.edge_offsets.copy(),
        tuple(intervals),
    )


def sector_curves(y_star: float, points: int = 1000):
    """Sampled (y, phi, eta1, eta2) curves over the feasible window."""
    lo, hi = -math.pi - y_star, math.pi - y_star
    y = np.linspace(lo, hi, points)
    u = y + y_star
    shift = math.sin(y_star)
    phi = np.sin(u) - shift
    eta1 = u - u**3 / 6.0 - shift
    eta2 = u - u**3 / 10.0 - shift
    return y, phi, eta1, eta2, (lo, hi)


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------


def power_flow(
    net: MicrogridNetwork,
    slack: int | None = None,
    p_star: np.ndarray | None = None,
    slack_angle: float | None = None,
    max_iters: int = 50,
    tol: float = 1e-10,
) -> np.ndarray:
    """Angle-only Newton-Raphson: solve injections(delta) = P* off-slack.

    Returns the full angle vector with the slack angle fixed.  Raises
    PowerFlowError on non-convergence; the caller treats the parameter
    sample as infeasible.
    """
    if not net.lossless:
        raise NetworkError("power_flow supports lossless networks only")
    slack = net.slack if slack is None else slack
    if slack not in net.index:
        raise NetworkError(f"unknown slack bus {slack}")
    s = net.index[slack]
    p = net.P_star if p_star is None else np.asarray(p_star, dtype=float)
    if slack_angle is None:
        slack_angle = float(net.delta_star[s])
    return _newton_power_flow(net, p, s, slack_angle, max_iters=max_iters, tol=tol)


def _newton_power_flow(
    net: MicrogridNetwork,
    p_star: np.ndarray,
    slack_idx: int,
    slack_angle: float,
    max_iters: int = 50,
    tol: float = 1e-10,
) -> np.ndarray:
    n = net.n
    if n == 1:
        return np.array([slack_angle])
    if n == 2:
        # single sine inversion: guard the asin domain explicitly
        other = 1 - slack_idx
        total = float(np.sum(net.kappa))
        if abs(p_star[other]) > total:
            raise PowerFlowError(
                f"two-bus network: |P*|={abs(p_star[other]):g} exceeds coupling {total:g}"
            )
    free = [i for i in range(n) if i != slack_idx]
    delta = np.full(n, slack_angle)
    for _ in range(max_iters):
        mismatch = net.injections(delta) - p_star
        res = np.max(np.abs(mismatch[free]))
        if res <= tol:
            return delta
        H = np.zeros((n, n))
        for j, (i, k) in enumerate(net.edges0):
            arg = delta[i] - delta[k] - net.theta[j] + math.pi / 2
            g = net.kappa[j] * math.cos(arg)
            arg_rev = delta[k] - delta[i] - net.theta[j] + math.pi / 2
            g_rev = net.kappa[j] * math.cos(arg_rev)
            H[i, i] += g
            H[i, k] -= g
            H[k, k] += g_rev
            H[k, i] -= g_rev
        Hf = H[np.ix_(free, free)]
        try:
            step = np.linalg.solve(Hf, mismatch[free])
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular power-flow Jacobian") from None
        if not np.all(np.isfinite(step)):
            raise PowerFlowError("power-flow step diverged")
        delta[free] -= step
    raise PowerFlowError(f"power flow did not converge in {max_iters} iterations")
