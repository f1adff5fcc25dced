"""Primary-market ACOPF assembly, clearing, and mitigation coefficient update.

The market problem is a convex QP built on the linearized current-injection
model around the no-load voltage profile. On the radial feeder it takes a
tree form: each non-slack bus owns its parent-line real power flow F and an
approximate voltage magnitude v, linked by

    flow balance:      F_b = sum(F_children) + d_b - c_b - g_b
    voltage recursion: v_b = v_parent - M_line F_b / S_base

with M[p,q] = Re(z[p,q] * exp(j(theta_q - theta_p))) the 3-phase drop
sensitivity. The objective prices PV setpoint deviation from the available
forecast (alpha), load curtailment disutility (beta), and per-phase line
losses through a diagonal-resistance quadratic proxy weighted by xi. Every
constraint couples only feeder neighbors, so the same QP clears centrally
or via the per-node consensus solver.

Mitigation follows the resilience-score-weighted update: with the PCC
deviation Delta = measured - forecast (import-positive), each node's
factor is gamma_i = 1 / clamp(1 + RS_i (Delta . delta_i) / (mu sum_j RS_j))
applied to both alpha_i and beta_i, and the loss weight rescales as
xi / mean(gamma), penalizing losses more heavily when generation is lost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, SolverError
from .netmodel import SLACK_PHASORS, FeederTree, Network, feeder_tree
from .optim import QuadraticProgram, partition_atoms, solve_centralized, solve_distributed
from .powerflow import InjectionSet, solve_power_flow

logger = logging.getLogger(__name__)

Z_CLAMP_FLOOR = 0.1
VOLTAGE_VALIDATION_BAND = 0.005  # pu tolerance on the post-clearing check


@dataclass(frozen=True, eq=False)
class Bid:
    node_id: int
    phase: int
    flexibility_kw: float  # max downward load adjustment
    pv_capacity_kw: float  # available PV, forecast-derived

    def __post_init__(self):
        if self.flexibility_kw < 0:
            raise InputError(f"bid at node {self.node_id}: flexibility must be >= 0")
        if self.pv_capacity_kw < 0:
            raise InputError(f"bid at node {self.node_id}: pv capacity must be >= 0")
        if self.phase not in (0, 1, 2):
            raise InputError(f"bid at node {self.node_id}: phase must be 0, 1, or 2")


@dataclass(eq=False)
class Coefficients:
    """Cost weights per market agent plus the global loss penalty."""

    node_ids: list[int]
    alpha: np.ndarray  # (n, 3) generation-deviation cost weights
    beta: np.ndarray  # (n, 3) curtailment disutility weights
    xi: np.ndarray  # (3,) loss penalty
    mu: float  # deviation scaling (kW)
    rs: np.ndarray  # (n,) resilience scores in (0, 1]

    def __post_init__(self):
        n = len(self.node_ids)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        self.rs = np.asarray(self.rs, dtype=float)
        if self.alpha.shape != (n, 3) or self.beta.shape != (n, 3):
            raise InputError("alpha/beta must be (n_nodes, 3)")
        if self.xi.shape != (3,):
            raise InputError("xi must be a 3-vector")
        if self.rs.shape != (n,):
            raise InputError("rs must have one entry per node")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0) or np.any(self.xi <= 0):
            raise InputError("alpha, beta, xi must be elementwise > 0")
        if self.mu <= 0:
            raise InputError("mu must be > 0")
        if np.any(self.rs <= 0) or np.any(self.rs > 1):
            raise InputError("resilience scores must lie in (0, 1]")

    def index_of(self, node_id: int) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise InputError(f"node {node_id} not covered by coefficients") from None


def uniform_coefficients(
    node_ids: list[int],
    alpha: float = 0.5,
    beta: float = 0.5,
    xi: float = 1.0,
    mu: float = 10.0,
    rs=1.0,
) -> Coefficients:
    n = len(node_ids)
    rs_arr = np.full(n, rs, dtype=float) if np.isscalar(rs) else np.asarray(rs, float)
    return Coefficients(
        node_ids=list(node_ids),
        alpha=np.full((n, 3), alpha),
        beta=np.full((n, 3), beta),
        xi=np.full(3, xi),
        mu=mu,
        rs=rs_arr,
    )


@dataclass(eq=False)
class MitigationContext:
    """Forecast vs measured PCC state driving the coefficient update."""

    p_pcc_forecast: np.ndarray  # (3,) kW, import-positive
    p_pcc_measured: np.ndarray  # (3,) kW, measured under attack
    delta_dirs: np.ndarray  # (n_nodes, 3) participation directions

    def __post_init__(self):
        self.p_pcc_forecast = np.asarray(self.p_pcc_forecast, dtype=float)
        self.p_pcc_measured = np.asarray(self.p_pcc_measured, dtype=float)
        self.delta_dirs = np.atleast_2d(np.asarray(self.delta_dirs, dtype=float))
        if self.p_pcc_forecast.shape != (3,) or self.p_pcc_measured.shape != (3,):
            raise InputError("PCC vectors must be 3-vectors")
        if np.count_nonzero(self.delta_dirs, axis=1).max(initial=0) > 1:
            raise InputError("delta_dirs must be nonzero on at most one phase per node")

    @property
    def delta_eff(self) -> np.ndarray:
        """Effective deviation: measured minus forecast (import-positive)."""
        return self.p_pcc_measured - self.p_pcc_forecast


def participation_directions(bids: list[Bid], node_ids: list[int]) -> np.ndarray:
    """Phase-indicator directions scaled by each node's flexibility share."""
    dirs = np.zeros((len(node_ids), 3))
    total = sum(b.flexibility_kw for b in bids)
    if total <= 0:
        return dirs
    pos = {nid: i for i, nid in enumerate(node_ids)}
    for b in bids:
        if b.node_id in pos:
            dirs[pos[b.node_id], b.phase] += b.flexibility_kw / total
    return dirs


@dataclass(eq=False)
class Dispatch:
    g: np.ndarray  # (n_bus, 3) PV setpoints, kW
    c: np.ndarray  # (n_bus, 3) load curtailment, kW
    objective: float
    losses: np.ndarray  # (3,) kW from the nonlinear validation flow
    pcc: np.ndarray  # (3,) kW from the nonlinear validation flow
    pcc_linear: np.ndarray  # (3,) kW from the QP balance
    voltages: np.ndarray  # (n_bus, 3) complex pu, validation flow
    solver: str
    iterations: int


@dataclass(eq=False)
class MarketProblem:
    qp: QuadraticProgram
    network: Network
    tree: FeederTree
    demand_kw: np.ndarray
    bids: list[Bid]
    coefficients: Coefficients
    objective_const: float
    f_idx: dict
    v_idx: dict
    g_idx: dict
    c_idx: dict
    pcc_idx: dict


def drop_sensitivity(z_block: np.ndarray, phases: tuple[int, ...]) -> np.ndarray:
    """M[p,q] = Re(z[p,q] exp(j(theta_q - theta_p))) over the given phases."""
    a = SLACK_PHASORS
    m = np.zeros((len(phases), len(phases)))
    for i, p in enumerate(phases):
        for j, q in enumerate(phases):
            m[i, j] = np.real(z_block[p, q] * a[q] * np.conj(a[p]))
    return m


def assemble_acopf(
    network: Network,
    bids: list[Bid],
    coefficients: Coefficients,
    demand_kw: np.ndarray,
) -> MarketProblem:
    """Build the tree-structured market QP (decision variables g, c, v)."""
    demand_kw = np.asarray(demand_kw, dtype=float)
    if demand_kw.shape != (network.n_bus, 3):
        raise InputError("demand must be (n_bus, 3) kW")
    if np.any(demand_kw < 0):
        raise InputError("demand must be >= 0")
    tree = feeder_tree(network)
    slack = network.slack_index
    if np.any(demand_kw[slack] != 0):
        raise InputError("slack bus carries no demand")
    for b, bus in enumerate(network.buses):
        absent = [p for p in range(3) if p not in bus.phases]
        if absent and np.any(demand_kw[b, absent] != 0):
            raise InputError(f"bus {bus.id}: demand on absent phase")

    for bus in network.buses:
        if not (bus.vmin <= 1.0 <= bus.vmax):
            raise InputError(
                f"infeasible voltage bounds at bus {bus.id}: "
                f"[{bus.vmin}, {bus.vmax}] excludes the no-load profile"
            )

    # Downstream phase continuity: a child line's phases must continue
    # through the parent, otherwise subtree power has no path to the slack.
    line_phases: dict[int, tuple[int, ...]] = {}
    for b in tree.order[1:]:
        bus = network.buses[b]
        parent_bus = network.buses[tree.parent[b]]
        ph = tuple(sorted(set(bus.phases) & set(parent_bus.phases)))
        line_phases[b] = ph
        if set(bus.phases) - set(ph):
            raise InputError(
                f"bus {bus.id}: phases {bus.phases} not all served by its parent line"
            )

    bid_map: dict[tuple[int, int], Bid] = {}
    for bid in bids:
        pos = network.bus_position(bid.node_id)
        if pos == slack:
            raise InputError("slack bus cannot bid")
        if bid.phase not in network.buses[pos].phases:
            raise InputError(f"bid at node {bid.node_id}: phase not present at bus")
        if bid.flexibility_kw > demand_kw[pos, bid.phase] + 1e-9:
            raise InputError(
                f"bid at node {bid.node_id}: flexibility {bid.flexibility_kw} kW "
                f"exceeds attached load {demand_kw[pos, bid.phase]} kW"
            )
        if (pos, bid.phase) in bid_map:
            raise InputError(f"duplicate bid for node {bid.node_id} phase {bid.phase}")
        bid_map[(pos, bid.phase)] = bid

    s_base = network.s_base_phase_kw

    names: list[str] = []
    owner: list[int] = []
    lb: list[float] = []
    ub: list[float] = []
    h_diag: list[float] = []
    c_lin: list[float] = []

    def add_var(name, atom, lo, hi, h, lin):
        names.append(name)
        owner.append(atom)
        lb.append(lo)
        ub.append(hi)
        h_diag.append(h)
        c_lin.append(lin)
        return len(names) - 1

    f_idx: dict[tuple[int, int], int] = {}
    v_idx: dict[tuple[int, int], int] = {}
    g_idx: dict[tuple[int, int], int] = {}
    c_idx: dict[tuple[int, int], int] = {}
    pcc_idx: dict[int, int] = {}
    objective_const = 0.0

    for b in tree.order[1:]:
        line = network.lines[tree.parent_line[b]]
        for p in line_phases[b]:
            xi_p = coefficients.xi[p]
            r_line = float(np.real(line.z[p, p]))
            f_idx[(b, p)] = add_var(
                f"F[{network.buses[b].id},{p}]",
                b,
                -np.inf,
                np.inf,
                2.0 * xi_p * r_line / s_base,
                0.0,
            )
    for b in range(network.n_bus):
        bus = network.buses[b]
        for p in bus.phases:
            v_idx[(b, p)] = add_var(
                f"v[{bus.id},{p}]", b, bus.vmin, bus.vmax, 0.0, 0.0
            )
    for (pos, p), bid in sorted(bid_map.items()):
        k = coefficients.index_of(bid.node_id)
        alpha = coefficients.alpha[k, p]
        beta = coefficients.beta[k, p]
        if bid.pv_capacity_kw > 0:
            # alpha (g_hat - g)^2 expands to alpha g^2 - 2 alpha g_hat g + const
            g_idx[(pos, p)] = add_var(
                f"g[{bid.node_id},{p}]",
                pos,
                0.0,
                bid.pv_capacity_kw,
                2.0 * alpha,
                -2.0 * alpha * bid.pv_capacity_kw,
            )
            objective_const += alpha * bid.pv_capacity_kw**2
        if bid.flexibility_kw > 0:
            c_idx[(pos, p)] = add_var(
                f"c[{bid.node_id},{p}]", pos, 0.0, bid.flexibility_kw, 2.0 * beta, 0.0
            )
    for p in range(3):
        pcc_idx[p] = add_var(f"P_pcc[{p}]", slack, -np.inf, np.inf, 0.0, 0.0)

    n_var = len(names)
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    row_owner: list[int] = []

    def add_row(atom):
        rows.append(np.zeros(n_var))
        rhs.append(0.0)
        row_owner.append(atom)
        return rows[-1]

    # Flow balance at every non-slack bus.
    for b in tree.order[1:]:
        for p in line_phases[b]:
            row = add_row(b)
            row[f_idx[(b, p)]] = 1.0
            for child in tree.children[b]:
                if (child, p) in f_idx:
                    row[f_idx[(child, p)]] = -1.0
            if (b, p) in c_idx:
                row[c_idx[(b, p)]] = 1.0
            if (b, p) in g_idx:
                row[g_idx[(b, p)]] = 1.0
            rhs[-1] = demand_kw[b, p]

    # Voltage recursion along each line.
    for b in tree.order[1:]:
        line = network.lines[tree.parent_line[b]]
        ph = line_phases[b]
        m_sens = drop_sensitivity(line.z, ph)
        parent = tree.parent[b]
        for i, p in enumerate(ph):
            row = add_row(b)
            row[v_idx[(b, p)]] = 1.0
            row[v_idx[(parent, p)]] = -1.0
            for j, q in enumerate(ph):
                row[f_idx[(b, q)]] += m_sens[i, j] / s_base
            rhs[-1] = 0.0

    # Slack voltage: pinned at 1, or sagging with the transformer drop.
    z_tx = network.transformer_z_pu()
    m_tx = drop_sensitivity(np.eye(3, dtype=complex) * z_tx, (0, 1, 2))
    for p in network.buses[slack].phases:
        row = add_row(slack)
        row[v_idx[(slack, p)]] = 1.0
        if z_tx != 0:
            for q in range(3):
                row[pcc_idx[q]] += m_tx[p, q] / s_base
        rhs[-1] = 1.0

    # PCC balance: import equals the flows leaving the slack bus.
    for p in range(3):
        row = add_row(slack)
        row[pcc_idx[p]] = 1.0
        for child in tree.children[slack]:
            if (child, p) in f_idx:
                row[f_idx[(child, p)]] = -1.0
        rhs[-1] = 0.0

    qp = QuadraticProgram(
        h=np.diag(np.array(h_diag)),
        c=np.array(c_lin),
        a_eq=np.array(rows) if rows else np.zeros((0, n_var)),
        b_eq=np.array(rhs),
        lb=np.array(lb),
        ub=np.array(ub),
        owner=np.array(owner, dtype=int),
        row_owner=np.array(row_owner, dtype=int),
        names=names,
    )
    qp.validate()
    return MarketProblem(
        qp=qp,
        network=network,
        tree=tree,
        demand_kw=demand_kw,
        bids=list(bids),
        coefficients=coefficients,
        objective_const=objective_const,
        f_idx=f_idx,
        v_idx=v_idx,
        g_idx=g_idx,
        c_idx=c_idx,
        pcc_idx=pcc_idx,
    )


def clear_market(
    problem: MarketProblem,
    solver_choice: str = "central",
    tol: float = 1e-6,
    **solver_kw,
) -> Dispatch:
    """Solve the market QP and validate the dispatch with a full power flow."""
    if solver_choice == "central":
        solution = solve_centralized(problem.qp, tol=tol)
    elif solver_choice == "distributed":
        partition = partition_atoms(problem.qp, problem.network)
        solution = solve_distributed(partition, tol=solver_kw.pop("dist_tol", 1e-6), **solver_kw)
    else:
        raise InputError(f"unknown solver choice {solver_choice!r}")

    network = problem.network
    n = network.n_bus
    g = np.zeros((n, 3))
    c = np.zeros((n, 3))
    for (b, p), i in problem.g_idx.items():
        g[b, p] = max(0.0, solution.x[i])
    for (b, p), i in problem.c_idx.items():
        c[b, p] = max(0.0, solution.x[i])
    pcc_linear = np.array([solution.x[problem.pcc_idx[p]] for p in range(3)])

    injections_kw = g - np.clip(problem.demand_kw - c, 0.0, None)
    injections_kw[network.slack_index] = 0.0
    flow = solve_power_flow(
        network, InjectionSet(s=network.kw_to_pu(injections_kw).astype(complex))
    )

    vmag = np.abs(flow.voltages)
    for b, bus in enumerate(network.buses):
        for p in bus.phases:
            v = vmag[b, p]
            if v < bus.vmin - VOLTAGE_VALIDATION_BAND or v > bus.vmax + VOLTAGE_VALIDATION_BAND:
                logger.warning(
                    "dispatch validation: bus %s phase %s voltage %.4f pu outside "
                    "[%.3f, %.3f] +/- %.3f",
                    bus.id, p, v, bus.vmin, bus.vmax, VOLTAGE_VALIDATION_BAND,
                )

    return Dispatch(
        g=g,
        c=c,
        objective=solution.objective + problem.objective_const,
        losses=flow.losses,
        pcc=flow.pcc,
        pcc_linear=pcc_linear,
        voltages=flow.voltages,
        solver=solver_choice,
        iterations=solution.iterations,
    )


def update_coefficients(ctx: MitigationContext, coeffs: Coefficients) -> Coefficients:
    """Resilience-score-weighted rescaling of (alpha, beta, xi)."""
    n = len(coeffs.node_ids)
    if n == 0:
        raise InputError("empty node set")
    if ctx.delta_dirs.shape != (n, 3):
        raise InputError(f"delta_dirs must be ({n}, 3)")
    delta = ctx.delta_eff
    rs_total = float(np.sum(coeffs.rs))
    z = 1.0 + coeffs.rs * (ctx.delta_dirs @ delta) / (coeffs.mu * rs_total)
    z = np.clip(z, Z_CLAMP_FLOOR, None)
    gamma = 1.0 / z
    xi_new = coeffs.xi / float(np.mean(gamma))
    return Coefficients(
        node_ids=list(coeffs.node_ids),
        alpha=coeffs.alpha * gamma[:, None],
        beta=coeffs.beta * gamma[:, None],
        xi=xi_new,
        mu=coeffs.mu,
        rs=coeffs.rs.copy(),
    )


def mitigate_redispatch(
    network: Network,
    bids: list[Bid],
    coeffs: Coefficients,
    ctx: MitigationContext,
    demand_kw: np.ndarray,
    attacked_nodes: set[int],
    solver_choice: str = "central",
    **solver_kw,
) -> tuple[Dispatch, Coefficients]:
    """Update coefficients, zero attacked PV capacity, and re-clear."""
    new_coeffs = update_coefficients(ctx, coeffs)
    adjusted = [
        replace(b, pv_capacity_kw=0.0) if b.node_id in attacked_nodes else b
        for b in bids
    ]
    problem = assemble_acopf(network, adjusted, new_coeffs, demand_kw)
    dispatch = clear_market(problem, solver_choice, **solver_kw)
    return dispatch, new_coeffs
