"""QP solvers: centralized reference, atom partition, consensus solve."""

import numpy as np
import pytest

from lemsim.errors import InputError, SolverError
from lemsim.netmodel import Bus, Network
from lemsim.optim import (
    AtomPartition,
    QuadraticProgram,
    _check_divergence,
    partition_atoms,
    solve_centralized,
    solve_distributed,
    write_trace,
)

from helpers import stiff_transformer, two_bus
from oracles import projected_gradient_qp


def box_qp(h_diag, c, lb, ub, **kw):
    n = len(c)
    return QuadraticProgram(
        h=np.diag(np.asarray(h_diag, dtype=float)),
        c=np.asarray(c, dtype=float),
        a_eq=np.zeros((0, n)),
        b_eq=np.zeros(0),
        lb=np.asarray(lb, dtype=float),
        ub=np.asarray(ub, dtype=float),
        **kw,
    )


def single_bus_network():
    return Network(
        buses=[Bus(id=0, phases=(0, 1, 2), is_slack=True)],
        lines=[],
        transformer=stiff_transformer(),
    )


class TestSolveCentralized:
    def test_active_bound(self):
        # minimize x^2 subject to x >= 1
        sol = solve_centralized(box_qp([2.0], [0.0], [1.0], [np.inf]))
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.kkt_residual <= 1e-6

    def test_unconstrained_diagonal_closed_form(self):
        h = np.array([2.0, 4.0, 1.0])
        c = np.array([1.0, -2.0, 0.5])
        sol = solve_centralized(
            box_qp(h, c, np.full(3, -np.inf), np.full(3, np.inf))
        )
        np.testing.assert_allclose(sol.x, -c / h, atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_projected_gradient_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = 10
        h = rng.uniform(0.5, 3.0, n)
        c = rng.normal(size=n)
        lb = rng.uniform(-2.0, -0.5, n)
        ub = rng.uniform(0.5, 2.0, n)
        sol = solve_centralized(box_qp(h, c, lb, ub), tol=1e-7)
        x_pg = projected_gradient_qp(h, c, lb, ub)
        assert np.max(np.abs(sol.x - x_pg)) <= 1e-6

    def test_infeasible_diagnosed(self):
        qp = box_qp([2.0], [0.0], [1.0], [np.inf])
        qp.a_eq = np.array([[1.0]])
        qp.b_eq = np.array([0.0])  # conflicts with x >= 1
        with pytest.raises(SolverError, match="infeasible"):
            solve_centralized(qp)

    def test_psd_validation(self):
        qp = box_qp([-1.0], [0.0], [-1.0], [1.0])
        with pytest.raises(InputError, match="positive semidefinite"):
            solve_centralized(qp)

    def test_equality_duals_returned(self):
        qp = box_qp([2.0, 2.0], [0.0, 0.0], np.full(2, -np.inf), np.full(2, np.inf))
        qp.a_eq = np.array([[1.0, 1.0]])
        qp.b_eq = np.array([2.0])
        sol = solve_centralized(qp)
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-7)
        assert sol.duals_eq.shape == (1,)


def toy_two_atom_qp():
    """(x0-1)^2 + (x1+2)^2 subject to x0 = x1; optimum at -0.5."""
    qp = QuadraticProgram(
        h=np.diag([2.0, 2.0]),
        c=np.array([-2.0, 4.0]),
        a_eq=np.array([[1.0, -1.0]]),
        b_eq=np.array([0.0]),
        lb=np.full(2, -np.inf),
        ub=np.full(2, np.inf),
        owner=np.array([0, 1]),
        row_owner=np.array([0]),
        names=["x0", "x1"],
    )
    return qp, two_bus()


class TestPartitionAtoms:
    def test_two_bus_two_atoms(self):
        qp, net = toy_two_atom_qp()
        part = partition_atoms(qp, net)
        assert len(part.atoms) == 2
        # Atom 0's row references x1, owned by atom 1 -> shared.
        assert list(part.atoms[0].copies) == [1]
        assert part.shared == {1: [1, 0]}

    def test_unowned_variable_rejected(self):
        qp, net = toy_two_atom_qp()
        qp.owner = np.array([0, -1])
        with pytest.raises(InputError, match="no owner"):
            partition_atoms(qp, net)

    def test_nonadjacent_coupling_rejected(self):
        qp, net = toy_two_atom_qp()
        net3 = Network(
            buses=[
                Bus(id=0, phases=(0, 1, 2), is_slack=True),
                Bus(id=1, phases=(0, 1, 2)),
                Bus(id=2, phases=(0, 1, 2)),
            ],
            lines=[net.lines[0], type(net.lines[0])(from_bus=1, to_bus=2, z=net.lines[0].z)],
            transformer=net.transformer,
        )
        qp.owner = np.array([0, 2])  # couples bus 0 and bus 2 across bus 1
        with pytest.raises(InputError, match="non-adjacent"):
            partition_atoms(qp, net3)


class TestSolveDistributed:
    def test_single_atom_matches_centralized(self):
        h = np.array([2.0, 3.0])
        c = np.array([-1.0, 2.0])
        qp = box_qp(h, c, np.array([-5.0, -5.0]), np.array([5.0, 5.0]),
                    owner=np.array([0, 0]), row_owner=np.zeros(0, dtype=int))
        part = partition_atoms(qp, single_bus_network())
        dist = solve_distributed(part, tol=1e-10)
        cent = solve_centralized(qp, tol=1e-8)
        assert np.max(np.abs(dist.x - cent.x)) <= 1e-8

    def test_two_atom_toy_matches_centralized(self):
        qp, net = toy_two_atom_qp()
        part = partition_atoms(qp, net)
        dist = solve_distributed(part, tol=1e-8)
        cent = solve_centralized(qp, tol=1e-8)
        assert np.max(np.abs(dist.x - cent.x)) <= 1e-5
        assert dist.x[0] == pytest.approx(-0.5, abs=1e-5)
        # Consensus at termination: copies agree within tol.
        assert dist.kkt_residual <= 1e-8

    def test_deterministic_trace(self):
        qp, net = toy_two_atom_qp()
        t1 = solve_distributed(partition_atoms(qp, net), tol=1e-8).trace
        qp2, net2 = toy_two_atom_qp()
        t2 = solve_distributed(partition_atoms(qp2, net2), tol=1e-8).trace
        np.testing.assert_array_equal(t1, t2)

    def test_residual_trend_decreases(self):
        qp, net = toy_two_atom_qp()
        sol = solve_distributed(partition_atoms(qp, net), tol=1e-9)
        primal = sol.trace[:, 1]
        if len(primal) > 20:
            # Windowed decrease: each 20-iteration window improves.
            assert primal[20] < primal[0]

    def test_nonseparable_rejected(self):
        qp, net = toy_two_atom_qp()
        qp.h = np.array([[2.0, 0.5], [0.5, 2.0]])
        with pytest.raises(InputError, match="separable"):
            solve_distributed(partition_atoms(qp, net))

    def test_nonconvergence_carries_trace(self):
        qp, net = toy_two_atom_qp()
        with pytest.raises(SolverError) as err:
            solve_distributed(partition_atoms(qp, net), tol=1e-14, max_iter=3)
        assert "trace" in err.value.diagnostics

    def test_rho_validation(self):
        qp, net = toy_two_atom_qp()
        with pytest.raises(InputError, match="rho"):
            solve_distributed(partition_atoms(qp, net), rho=0.0)


class TestDivergenceCheck:
    def test_growth_detected(self):
        history = [1e-3] * 51 + [1e-3 * 2e4]
        assert _check_divergence(history, tol=1e-6)

    def test_flat_history_ok(self):
        assert not _check_divergence([0.5] * 200, tol=1e-6)

    def test_sub_tolerance_noise_ignored(self):
        # Oscillation near the tolerance floor is not divergence.
        history = [5e-7] * 51 + [6e-6]
        assert not _check_divergence(history, tol=1e-6)


def test_write_trace(tmp_path):
    trace = np.array([[1, 0.5, 0.25, 10.0], [2, 0.25, 0.125, 9.0]])
    path = tmp_path / "trace.csv"
    write_trace(trace, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,primal_residual,dual_residual,objective"
    assert lines[1].startswith("1,")
    assert len(lines) == 3
