"""Quadratic program solvers: centralized reference and per-node consensus.

The centralized path delegates to cvxpy (CLARABEL) and verifies the KKT
residual of the returned primal-dual point. The distributed path splits
the problem into per-bus "atoms" that own disjoint variable blocks and
hold copies of the boundary variables shared with their feeder neighbors.
Each iteration an atom solves a small equality-constrained proximal QP in
closed form (its KKT factorization is cached between iterations); the
coordination step then averages each variable's instances, projects onto
the box constraints, and advances scaled duals. The per-iteration data
exchange crosses only feeder lines.

The distributed solver requires a separable (diagonal) quadratic objective
and equality + box constraints; the market problems built by this package
have exactly that structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse

from .errors import InputError, SolverError
from .netmodel import Network


@dataclass(eq=False)
class QuadraticProgram:
    """min 0.5 x'Hx + c'x  s.t.  A_eq x = b_eq, A_in x <= b_in, lb <= x <= ub."""

    h: np.ndarray
    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    a_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    owner: np.ndarray | None = None  # atom id per variable
    row_owner: np.ndarray | None = None  # atom id per equality row
    names: list[str] | None = None

    @property
    def n_var(self) -> int:
        return len(self.c)

    def validate(self) -> None:
        n = self.n_var
        if self.h.shape != (n, n):
            raise InputError(f"H shape {self.h.shape} != ({n}, {n})")
        if self.a_eq.shape[1] != n or len(self.b_eq) != self.a_eq.shape[0]:
            raise InputError("equality constraint dimensions inconsistent")
        if len(self.lb) != n or len(self.ub) != n:
            raise InputError("bound dimensions inconsistent")
        if self.a_ineq is not None and (
            self.a_ineq.shape[1] != n or len(self.b_ineq) != self.a_ineq.shape[0]
        ):
            raise InputError("inequality constraint dimensions inconsistent")
        # PSD check by factorization of the symmetrized form.
        sym = 0.5 * (self.h + self.h.T)
        try:
            np.linalg.cholesky(sym + 1e-10 * np.eye(n))
        except np.linalg.LinAlgError:
            raise InputError("objective is not positive semidefinite") from None

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.h @ x + self.c @ x)

    def is_separable(self) -> bool:
        return not np.any(self.h - np.diag(np.diag(self.h)))


@dataclass(eq=False)
class Solution:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    duals_eq: np.ndarray | None = None
    trace: np.ndarray | None = None  # (iters, 4): it, primal, dual, objective


def solve_centralized(qp: QuadraticProgram, tol: float = 1e-6, max_iter: int = 200) -> Solution:
    """Reference QP solve; returns a primal-dual point with KKT <= tol."""
    qp.validate()
    n = qp.n_var
    x = cp.Variable(n)
    constraints = [qp.a_eq @ x == qp.b_eq] if len(qp.b_eq) else []
    if qp.a_ineq is not None and len(qp.b_ineq):
        constraints.append(qp.a_ineq @ x <= qp.b_ineq)
    lo_mask = np.isfinite(qp.lb)
    hi_mask = np.isfinite(qp.ub)
    if lo_mask.any():
        constraints.append(x[lo_mask] >= qp.lb[lo_mask])
    if hi_mask.any():
        constraints.append(x[hi_mask] <= qp.ub[hi_mask])

    hd = np.diag(qp.h)
    if qp.is_separable():
        quad = 0.5 * cp.sum(cp.multiply(hd, cp.square(x)))
    else:
        quad = 0.5 * cp.quad_form(x, cp.psd_wrap(0.5 * (qp.h + qp.h.T)))
    problem = cp.Problem(cp.Minimize(quad + qp.c @ x), constraints)
    try:
        problem.solve(solver=cp.CLARABEL, max_iter=max_iter)
    except cp.error.SolverError as exc:
        raise SolverError(f"centralized solve failed: {exc}") from exc
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise SolverError("problem is infeasible", diagnostics={"status": problem.status})
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(f"unexpected solver status {problem.status}")

    xv = np.asarray(x.value, dtype=float)
    duals_eq = (
        np.atleast_1d(np.asarray(constraints[0].dual_value, dtype=float))
        if len(qp.b_eq)
        else np.zeros(0)
    )
    residual = kkt_residual(qp, xv, constraints, lo_mask, hi_mask)
    if residual > tol:
        raise SolverError(
            f"KKT residual {residual:.3e} exceeds tol {tol:.3e}",
            diagnostics={"residual": residual},
        )
    return Solution(
        x=xv,
        objective=qp.objective(xv),
        kkt_residual=residual,
        iterations=int(problem.solver_stats.num_iters or 0),
        duals_eq=duals_eq,
    )


def kkt_residual(qp, x, constraints, lo_mask, hi_mask) -> float:
    """Stationarity + feasibility + complementarity, inf-norm."""
    grad = qp.h @ x + qp.c
    ci = iter(constraints)
    feas = [0.0]
    if len(qp.b_eq):
        con = next(ci)
        nu = np.atleast_1d(np.asarray(con.dual_value, dtype=float))
        grad += qp.a_eq.T @ nu
        feas.append(float(np.max(np.abs(qp.a_eq @ x - qp.b_eq))))
    if qp.a_ineq is not None and len(qp.b_ineq):
        con = next(ci)
        lam = np.clip(np.atleast_1d(np.asarray(con.dual_value, dtype=float)), 0, None)
        grad += qp.a_ineq.T @ lam
        slack = qp.b_ineq - qp.a_ineq @ x
        feas.append(float(np.max(np.clip(-slack, 0, None), initial=0.0)))
        feas.append(float(np.max(np.abs(lam * slack), initial=0.0)))
    if lo_mask.any():
        con = next(ci)
        mu = np.clip(np.atleast_1d(np.asarray(con.dual_value, dtype=float)), 0, None)
        grad[lo_mask] -= mu
        feas.append(float(np.max(np.clip(qp.lb[lo_mask] - x[lo_mask], 0, None), initial=0.0)))
        feas.append(float(np.max(np.abs(mu * (x[lo_mask] - qp.lb[lo_mask])), initial=0.0)))
    if hi_mask.any():
        con = next(ci)
        mu = np.clip(np.atleast_1d(np.asarray(con.dual_value, dtype=float)), 0, None)
        grad[hi_mask] += mu
        feas.append(float(np.max(np.clip(x[hi_mask] - qp.ub[hi_mask], 0, None), initial=0.0)))
        feas.append(float(np.max(np.abs(mu * (qp.ub[hi_mask] - x[hi_mask])), initial=0.0)))
    return max(float(np.max(np.abs(grad))), *feas)


# ---------------------------------------------------------------------------
# Atom partition


@dataclass(eq=False)
class Atom:
    atom_id: int
    owned: np.ndarray  # global variable indices
    rows: np.ndarray  # global equality row indices
    copies: np.ndarray  # boundary variables owned by neighbor atoms


@dataclass(eq=False)
class AtomPartition:
    qp: QuadraticProgram
    atoms: list[Atom]
    # shared variable -> atom ids where it appears (owner first)
    shared: dict[int, list[int]] = field(default_factory=dict)


def partition_atoms(qp: QuadraticProgram, network: Network) -> AtomPartition:
    """Split the QP into per-bus atoms along the feeder topology."""
    qp.validate()
    if qp.owner is None or qp.row_owner is None:
        raise InputError("QP carries no variable/row ownership map")
    if np.any(qp.owner < 0):
        orphan = int(np.argmax(qp.owner < 0))
        name = qp.names[orphan] if qp.names else str(orphan)
        raise InputError(f"variable {name} has no owner")
    if qp.a_ineq is not None and len(qp.b_ineq):
        raise InputError("atom partition supports equality + box constraints only")

    n_atoms = network.n_bus
    adjacency = {i: set() for i in range(n_atoms)}
    for line in network.lines:
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        adjacency[fi].add(ti)
        adjacency[ti].add(fi)

    copies: dict[int, set[int]] = {a: set() for a in range(n_atoms)}
    for r in range(qp.a_eq.shape[0]):
        a = int(qp.row_owner[r])
        for v in np.flatnonzero(qp.a_eq[r]):
            if int(qp.owner[v]) != a:
                copies[a].add(int(v))

    shared: dict[int, list[int]] = {}
    for a, vs in copies.items():
        for v in vs:
            shared.setdefault(v, [int(qp.owner[v])]).append(a)

    for v, atom_ids in shared.items():
        users = set(atom_ids)
        if len(users) != len(atom_ids):
            continue  # owner listed once, copiers unique
        owner = atom_ids[0]
        for copier in atom_ids[1:]:
            if copier not in adjacency[owner]:
                name = qp.names[v] if qp.names else str(v)
                raise InputError(
                    f"shared variable {name} couples non-adjacent atoms "
                    f"{owner} and {copier}"
                )

    atoms = []
    for a in range(n_atoms):
        atoms.append(
            Atom(
                atom_id=a,
                owned=np.flatnonzero(qp.owner == a),
                rows=np.flatnonzero(qp.row_owner == a),
                copies=np.array(sorted(copies[a]), dtype=int),
            )
        )
    return AtomPartition(qp=qp, atoms=atoms, shared=shared)


# ---------------------------------------------------------------------------
# Distributed consensus solve


def _check_divergence(primal_history: list[float], tol: float, window: int = 50) -> bool:
    """Boundary disagreement grew 10x over the window, well above tol."""
    if len(primal_history) < window + 1:
        return False
    recent = primal_history[-1]
    past = primal_history[-window - 1]
    return (
        np.isfinite(past)
        and past > 10.0 * tol
        and recent > 10.0 * past
        and recent > 100.0 * tol
    )


class _StackedAtoms:
    """All atoms' local proximal solves fused into one affine operator.

    The local step  min 0.5 x'(D+rho)x + q'x  s.t.  Ex = f  is affine in q:
    x = -P q + s with P = K - K E'(E K E')^-1 E K, K = (D+rho)^-1. Stacking
    every atom's P into a block-diagonal sparse matrix turns the per-atom
    loop into a single matvec per iteration.
    """

    def __init__(self, qp: QuadraticProgram, atoms: list[Atom]):
        self.qp = qp
        hd = np.diag(qp.h)
        self.blocks = []
        local_vars = []
        for atom in atoms:
            lv = np.concatenate([atom.owned, atom.copies]).astype(int)
            e = (
                qp.a_eq[np.ix_(atom.rows, lv)]
                if len(atom.rows)
                else np.zeros((0, len(lv)))
            )
            f = qp.b_eq[atom.rows] if len(atom.rows) else np.zeros(0)
            d = np.zeros(len(lv))
            q0 = np.zeros(len(lv))
            d[: len(atom.owned)] = hd[atom.owned]
            q0[: len(atom.owned)] = qp.c[atom.owned]
            self.blocks.append((lv, e, f, d, q0))
            local_vars.append(lv)
        self.inst_global = np.concatenate(local_vars)
        self.n_inst = len(self.inst_global)
        self.q_obj = np.concatenate([b[4] for b in self.blocks])
        self.counts = np.zeros(qp.n_var)
        np.add.at(self.counts, self.inst_global, 1.0)
        self._rho = None
        self._p_op = None
        self._s_vec = None

    def factorize(self, rho: float) -> None:
        if self._rho == rho:
            return
        self._rho = rho
        p_blocks = []
        s_parts = []
        for lv, e, f, d, _ in self.blocks:
            k_inv = 1.0 / (d + rho)
            if len(f):
                ek = e * k_inv
                m_mat = ek @ e.T
                try:
                    m_inv = np.linalg.inv(m_mat)
                except np.linalg.LinAlgError:
                    m_inv = np.linalg.pinv(m_mat)
                p_blocks.append(np.diag(k_inv) - ek.T @ m_inv @ ek)
                s_parts.append(ek.T @ (m_inv @ f))
            else:
                p_blocks.append(np.diag(k_inv))
                s_parts.append(np.zeros(len(lv)))
        self._p_op = scipy.sparse.block_diag(p_blocks, format="csr")
        self._s_vec = np.concatenate(s_parts)

    def local_step(self, q_tilde: np.ndarray) -> np.ndarray:
        return self._s_vec - self._p_op @ q_tilde


def _variable_scales(qp: QuadraticProgram) -> np.ndarray:
    """Per-variable magnitude scale from bounds and equality coefficients.

    Mixed physical units (kW flows next to per-unit voltages) slow the
    consensus iteration badly; normalizing every column to O(1) keeps the
    residuals commensurable.
    """
    n = qp.n_var
    scale = np.ones(n)
    finite_b = np.abs(qp.b_eq[np.isfinite(qp.b_eq)])
    b_scale = float(np.max(finite_b, initial=1.0))
    for i in range(n):
        bounds = [abs(v) for v in (qp.lb[i], qp.ub[i]) if np.isfinite(v) and v != 0]
        if bounds:
            scale[i] = max(bounds)
        else:
            col = np.abs(qp.a_eq[:, i]) if qp.a_eq.size else np.zeros(0)
            scale[i] = b_scale / max(float(np.max(col, initial=0.0)), 1e-6)
    return np.clip(scale, 1e-3, 1e6)


def _scaled_qp(qp: QuadraticProgram, scale: np.ndarray) -> QuadraticProgram:
    row_scale = np.ones(len(qp.b_eq))
    a_eq = qp.a_eq * scale[None, :] if qp.a_eq.size else qp.a_eq
    if a_eq.size:
        row_scale = 1.0 / np.maximum(np.abs(a_eq).max(axis=1), 1e-9)
        a_eq = a_eq * row_scale[:, None]
    return QuadraticProgram(
        h=qp.h * np.outer(scale, scale),
        c=qp.c * scale,
        a_eq=a_eq,
        b_eq=qp.b_eq * row_scale,
        lb=qp.lb / scale,
        ub=qp.ub / scale,
        owner=qp.owner,
        row_owner=qp.row_owner,
        names=qp.names,
    )


def solve_distributed(
    partition: AtomPartition,
    rho: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 50000,
    seed: int = 0,
    adapt_rho: bool = True,
    adapt_until: int = 500,
    relax: float = 1.5,
) -> Solution:
    """Consensus solve over the atom partition.

    Splitting: each atom solves its equality-constrained proximal QP in
    closed form over owned + copied boundary variables; the coordination
    step averages every variable's instances, projects onto the box, and
    updates scaled duals (with over-relaxation factor `relax`). Residual
    balancing adjusts rho during the first `adapt_until` iterations only:
    the rescaling perturbs the marginal (zero-curvature) voltage-chain
    modes, so the endgame runs with rho frozen. Terminates when the
    largest disagreement between an atom copy and its consensus value
    drops below tol. Deterministic for a fixed schedule; `seed` is
    accepted for interface symmetry but nothing is randomized.
    """
    del seed  # synchronous fixed schedule; nothing randomized
    if rho <= 0:
        raise InputError("rho must be > 0")
    if not (1.0 <= relax < 2.0):
        raise InputError("relaxation factor must lie in [1, 2)")
    raw = partition.qp
    if not raw.is_separable():
        raise InputError("distributed solver requires a separable (diagonal) objective")
    scale = _variable_scales(raw)
    qp = _scaled_qp(raw, scale)

    stacked = _StackedAtoms(qp, partition.atoms)
    n = qp.n_var
    inst = stacked.inst_global
    counts = stacked.counts
    hd = np.diag(qp.h)
    hd_raw = np.diag(raw.h)

    # Consensus starts from the clipped unconstrained guess per variable.
    with np.errstate(divide="ignore", invalid="ignore"):
        guess = np.where(hd > 0, -qp.c / np.where(hd > 0, hd, 1.0), 0.0)
    z = np.clip(guess, qp.lb, qp.ub)
    z[~np.isfinite(z)] = 0.0

    u = np.zeros(stacked.n_inst)
    trace_rows = []
    primal_history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        stacked.factorize(rho)

        # Local proximal steps: one fused solve across all atoms.
        q_tilde = stacked.q_obj + rho * (u - z[inst])
        x = stacked.local_step(q_tilde)

        # Coordination: average relaxed instances, project onto the box,
        # then advance the scaled duals.
        z_prev = z
        x_hat = relax * x + (1.0 - relax) * z_prev[inst]
        sums = np.zeros(n)
        np.add.at(sums, inst, x_hat + u)
        z = np.clip(sums / counts, qp.lb, qp.ub)

        u = u + x_hat - z[inst]
        primal = float(np.max(np.abs(x - z[inst]), initial=0.0))
        dual = rho * float(np.max(np.abs(z - z_prev), initial=0.0))

        zr = z * scale
        obj = float(np.sum(0.5 * hd_raw * zr * zr + raw.c * zr))
        trace_rows.append((it, primal, dual, obj))
        primal_history.append(primal)

        if primal <= tol and dual <= tol:
            break
        if _check_divergence(primal_history, tol):
            raise SolverError(
                "distributed iteration diverged (boundary disagreement grew 10x)",
                diagnostics={"trace": np.array(trace_rows)},
            )
        if adapt_rho and it <= adapt_until and it % 50 == 0 and primal > 10 * tol and dual > 0:
            if primal > 10 * dual:
                rho *= 2.0
                u /= 2.0
            elif dual > 10 * primal:
                rho /= 2.0
                u *= 2.0
    else:
        raise SolverError(
            f"distributed solve did not reach tol {tol:.1e} in {max_iter} iterations",
            diagnostics={"trace": np.array(trace_rows)},
        )

    x_final = z * scale
    return Solution(
        x=x_final,
        objective=raw.objective(x_final),
        kkt_residual=float(trace_rows[-1][1]),
        iterations=it,
        trace=np.array(trace_rows),
    )


def write_trace(trace: np.ndarray, path) -> None:
    """Convergence trace as delimited text, one row per iteration."""
    with open(path, "w") as fh:
        fh.write("iteration,primal_residual,dual_residual,objective\n")
        for row in trace:
            fh.write(f"{int(row[0])},{row[1]:.9e},{row[2]:.9e},{row[3]:.9e}\n")
