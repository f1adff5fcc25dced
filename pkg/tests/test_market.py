"""Market assembly, clearing, and the mitigation coefficient update."""

import itertools

import numpy as np
import pytest

from lemsim.errors import InputError
from lemsim.market import (
    Bid,
    Coefficients,
    MitigationContext,
    assemble_acopf,
    clear_market,
    mitigate_redispatch,
    participation_directions,
    update_coefficients,
    uniform_coefficients,
)
from lemsim.netmodel import Bus, Line, Network
from lemsim.optim import partition_atoms

from helpers import stiff_transformer, two_bus


def chain_feeder(n_bus=5, z_pu=0.05 + 0.02j) -> Network:
    """Slack + a chain of three-phase buses."""
    z = np.eye(3, dtype=complex) * z_pu
    buses = [Bus(id=0, phases=(0, 1, 2), is_slack=True)]
    lines = []
    for i in range(1, n_bus):
        buses.append(Bus(id=i, phases=(0, 1, 2)))
        lines.append(Line(from_bus=i - 1, to_bus=i, z=z))
    return Network(buses=buses, lines=lines, transformer=stiff_transformer())


def demand_array(network, entries):
    d = np.zeros((network.n_bus, 3))
    for (b, p), val in entries.items():
        d[b, p] = val
    return d


class TestAssemble:
    def test_zero_loads_zero_bids(self):
        net = chain_feeder(3)
        coeffs = uniform_coefficients([1, 2])
        problem = assemble_acopf(net, [], coeffs, np.zeros((3, 3)))
        dispatch = clear_market(problem)
        assert dispatch.objective == pytest.approx(0.0, abs=1e-9)
        assert not dispatch.g.any() and not dispatch.c.any()
        np.testing.assert_allclose(dispatch.pcc, 0.0, atol=1e-9)

    def test_infeasible_voltage_bounds(self):
        net = chain_feeder(3)
        buses = list(net.buses)
        buses[2] = Bus(id=2, phases=(0, 1, 2), vmin=1.2, vmax=1.3)
        bad = Network(buses=buses, lines=net.lines, transformer=net.transformer)
        with pytest.raises(InputError, match="infeasible"):
            assemble_acopf(bad, [], uniform_coefficients([1, 2]), np.zeros((3, 3)))

    def test_flexibility_exceeding_load_rejected(self):
        net = two_bus()
        d = demand_array(net, {(1, 0): 2.0})
        bids = [Bid(node_id=1, phase=0, flexibility_kw=5.0, pv_capacity_kw=0.0)]
        with pytest.raises(InputError, match="exceeds attached load"):
            assemble_acopf(net, bids, uniform_coefficients([1]), d)

    def test_two_bus_curtailment_matches_hand_optimum(self):
        # One load d, flexibility f, no PV: J(c) = beta c^2 + xi R (d-c)^2 / S.
        # dJ/dc = 0 gives c* = k d / (beta + k) with k = xi R / S.
        z_pu = 0.5 + 0.25j
        net = two_bus(z_pu=z_pu)
        d_kw, f_kw, beta, xi = 10.0, 4.0, 0.01, 1.0
        k = xi * np.real(z_pu) / net.s_base_phase_kw
        c_star = k * d_kw / (beta + k)
        assert 0 < c_star < f_kw  # interior optimum by construction

        coeffs = uniform_coefficients([1], beta=beta, xi=xi)
        d = demand_array(net, {(1, 0): d_kw})
        bids = [Bid(node_id=1, phase=0, flexibility_kw=f_kw, pv_capacity_kw=0.0)]
        dispatch = clear_market(assemble_acopf(net, bids, coeffs, d))
        assert dispatch.c[1, 0] == pytest.approx(c_star, rel=1e-4)

    def test_duplicate_bid_rejected(self):
        net = two_bus()
        d = demand_array(net, {(1, 0): 2.0})
        bids = [
            Bid(node_id=1, phase=0, flexibility_kw=1.0, pv_capacity_kw=0.0),
            Bid(node_id=1, phase=0, flexibility_kw=0.5, pv_capacity_kw=0.0),
        ]
        with pytest.raises(InputError, match="duplicate"):
            assemble_acopf(net, bids, uniform_coefficients([1]), d)


def five_node_setup(seed=0):
    net = chain_feeder(5, z_pu=0.08 + 0.03j)
    rng = np.random.default_rng(seed)
    d = np.zeros((5, 3))
    bids = []
    phases = [0, 1, 2, 0]
    for i, b in enumerate(range(1, 5)):
        p = phases[i]
        d[b, p] = rng.uniform(3.0, 8.0)
        pv = rng.uniform(0.0, 2.0) if i % 2 == 0 else 0.0
        flex = rng.uniform(0.5, 1.5) if i % 2 == 1 else 0.0
        bids.append(
            Bid(node_id=b, phase=p, flexibility_kw=min(flex, d[b, p]), pv_capacity_kw=pv)
        )
    coeffs = uniform_coefficients([1, 2, 3, 4], alpha=0.2, beta=0.05, xi=2.0)
    return net, bids, coeffs, d


class TestClearMarket:
    def test_five_node_matches_brute_force(self):
        net, bids, coeffs, d = five_node_setup()
        problem = assemble_acopf(net, bids, coeffs, d)
        dispatch = clear_market(problem)

        # Brute-force lattice over the (g, c) box; voltage limits are slack
        # at these loadings so the box search covers the feasible set.
        tree = problem.tree
        s_base = net.s_base_phase_kw
        var_bids = [b for b in bids if b.pv_capacity_kw > 0 or b.flexibility_kw > 0]

        def objective(choice):
            g = np.zeros((5, 3))
            c = np.zeros((5, 3))
            total = 0.0
            for bid, val in zip(var_bids, choice):
                pos = net.bus_position(bid.node_id)
                k = coeffs.index_of(bid.node_id)
                if bid.pv_capacity_kw > 0:
                    g[pos, bid.phase] = val
                    total += coeffs.alpha[k, bid.phase] * (bid.pv_capacity_kw - val) ** 2
                else:
                    c[pos, bid.phase] = val
                    total += coeffs.beta[k, bid.phase] * val**2
            inj = d - c - g
            for b in tree.order[1:]:
                line = net.lines[tree.parent_line[b]]
                flow = inj[tree.subtree(b)].sum(axis=0)
                for p in range(3):
                    total += coeffs.xi[p] * np.real(line.z[p, p]) * flow[p] ** 2 / s_base
            return total

        grids = []
        for bid in var_bids:
            hi = bid.pv_capacity_kw if bid.pv_capacity_kw > 0 else bid.flexibility_kw
            grids.append(np.arange(0.0, hi + 1e-9, 0.1))
        best, best_val = None, np.inf
        for choice in itertools.product(*grids):
            val = objective(choice)
            if val < best_val:
                best, best_val = choice, val

        qp_choice = []
        for bid in var_bids:
            pos = net.bus_position(bid.node_id)
            if bid.pv_capacity_kw > 0:
                qp_choice.append(dispatch.g[pos, bid.phase])
            else:
                qp_choice.append(dispatch.c[pos, bid.phase])
        np.testing.assert_allclose(qp_choice, best, atol=0.1 + 1e-6)
        assert dispatch.objective <= best_val + 1e-6

    def test_validation_flow_consistency(self):
        net, bids, coeffs, d = five_node_setup()
        dispatch = clear_market(assemble_acopf(net, bids, coeffs, d))
        # Linear PCC estimate tracks the exact one up to loss allocation.
        assert np.sum(dispatch.pcc) == pytest.approx(
            np.sum(dispatch.pcc_linear) + np.sum(dispatch.losses), abs=0.2
        )

    def test_distributed_matches_central(self):
        net, bids, coeffs, d = five_node_setup()
        problem = assemble_acopf(net, bids, coeffs, d)
        central = clear_market(problem, "central")
        dist = clear_market(problem, "distributed", dist_tol=1e-7)
        assert abs(dist.objective - central.objective) <= 1e-4 * max(
            1.0, abs(central.objective)
        )
        np.testing.assert_allclose(dist.g, central.g, atol=1e-3)
        np.testing.assert_allclose(dist.c, central.c, atol=1e-3)

    def test_unknown_solver(self):
        net, bids, coeffs, d = five_node_setup()
        problem = assemble_acopf(net, bids, coeffs, d)
        with pytest.raises(InputError, match="solver"):
            clear_market(problem, "quantum")


class TestPartitionOfMarketQp:
    def test_atom_and_shared_counts(self):
        net, bids, coeffs, d = five_node_setup()
        problem = assemble_acopf(net, bids, coeffs, d)
        part = partition_atoms(problem.qp, net)
        assert len(part.atoms) == net.n_bus
        copy_instances = sum(len(a.copies) for a in part.atoms)
        line_phase_count = sum(3 for _ in net.lines)  # all lines three-phase
        assert copy_instances == 2 * line_phase_count


class TestUpdateCoefficients:
    def worked_example(self):
        coeffs = Coefficients(
            node_ids=[1, 2],
            alpha=np.ones((2, 3)),
            beta=np.full((2, 3), 2.0),
            xi=np.full(3, 3.0),
            mu=1.0,
            rs=np.array([1.0, 1.0]),
        )
        ctx = MitigationContext(
            p_pcc_forecast=np.zeros(3),
            p_pcc_measured=np.array([10.0, 0.0, 0.0]),
            delta_dirs=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
        )
        return coeffs, ctx

    def test_worked_two_node_example(self):
        # Z1 = 1 + 1*10/(1*2) = 6, gamma1 = 1/6, gamma2 = 1,
        # xi_bar = ((1/6 + 1/6 + 1 + 1)/4)^-1 xi = (7/12)^-1 xi.
        coeffs, ctx = self.worked_example()
        out = update_coefficients(ctx, coeffs)
        assert out.alpha[0, 0] == pytest.approx(1.0 / 6.0, abs=1e-12)
        assert out.beta[0, 0] == pytest.approx(2.0 / 6.0, abs=1e-12)
        assert out.alpha[1, 0] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(out.xi, 3.0 * 12.0 / 7.0, atol=1e-12)

    def test_identity_at_zero_delta(self):
        coeffs, _ = self.worked_example()
        ctx = MitigationContext(
            p_pcc_forecast=np.array([5.0, 2.0, 1.0]),
            p_pcc_measured=np.array([5.0, 2.0, 1.0]),
            delta_dirs=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        )
        out = update_coefficients(ctx, coeffs)
        np.testing.assert_array_equal(out.alpha, coeffs.alpha)
        np.testing.assert_array_equal(out.beta, coeffs.beta)
        np.testing.assert_array_equal(out.xi, coeffs.xi)

    def test_generation_loss_direction(self):
        # Positive deviation along every participating direction:
        # gamma < 1 there and the loss penalty grows.
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            coeffs = uniform_coefficients(list(range(n)), mu=float(rng.uniform(0.5, 20)))
            phases = rng.integers(0, 3, size=n)
            dirs = np.zeros((n, 3))
            share = rng.uniform(0.1, 1.0, size=n)
            for i in range(n):
                dirs[i, phases[i]] = share[i] / share.sum()
            delta = rng.uniform(1.0, 30.0, size=3)  # net-load increase, all phases
            ctx = MitigationContext(np.zeros(3), delta, dirs)
            out = update_coefficients(ctx, coeffs)
            participating = dirs.sum(axis=1) > 0
            assert np.all(out.alpha[participating] < coeffs.alpha[participating])
            assert np.all(out.beta[participating] < coeffs.beta[participating])
            assert np.all(out.xi >= coeffs.xi)

    def test_rs_monotonicity(self):
        # Raising one node's resilience score lowers its gamma.
        base = uniform_coefficients([0, 1, 2], rs=np.array([0.5, 0.5, 0.5]))
        dirs = np.zeros((3, 3))
        dirs[:, 0] = [0.4, 0.3, 0.3]
        ctx = MitigationContext(np.zeros(3), np.array([20.0, 0.0, 0.0]), dirs)
        out_low = update_coefficients(ctx, base)
        bumped = uniform_coefficients([0, 1, 2], rs=np.array([0.9, 0.5, 0.5]))
        out_high = update_coefficients(ctx, bumped)
        gamma_low = out_low.alpha[0, 0] / base.alpha[0, 0]
        gamma_high = out_high.alpha[0, 0] / bumped.alpha[0, 0]
        assert gamma_high < gamma_low

    def test_mu_delta_joint_scaling_invariance(self):
        coeffs, ctx = self.worked_example()
        out1 = update_coefficients(ctx, coeffs)
        scaled_ctx = MitigationContext(
            p_pcc_forecast=ctx.p_pcc_forecast * 7.5,
            p_pcc_measured=ctx.p_pcc_measured * 7.5,
            delta_dirs=ctx.delta_dirs,
        )
        scaled_coeffs = Coefficients(
            node_ids=coeffs.node_ids,
            alpha=coeffs.alpha,
            beta=coeffs.beta,
            xi=coeffs.xi,
            mu=coeffs.mu * 7.5,
            rs=coeffs.rs,
        )
        out2 = update_coefficients(scaled_ctx, scaled_coeffs)
        np.testing.assert_allclose(out1.alpha, out2.alpha, atol=1e-12)
        np.testing.assert_allclose(out1.xi, out2.xi, atol=1e-12)

    def test_z_clamped_below(self):
        # Large opposing deviation drives Z toward zero; the clamp keeps
        # coefficients positive.
        coeffs = uniform_coefficients([0], mu=0.1)
        dirs = np.array([[1.0, 0.0, 0.0]])
        ctx = MitigationContext(np.array([50.0, 0, 0]), np.zeros(3), dirs)
        out = update_coefficients(ctx, coeffs)
        assert out.alpha[0, 0] == pytest.approx(coeffs.alpha[0, 0] / 0.1)

    def test_empty_node_set(self):
        coeffs = uniform_coefficients([0])
        coeffs.node_ids = []
        coeffs.alpha = np.zeros((0, 3))
        ctx = MitigationContext(np.zeros(3), np.zeros(3), np.zeros((0, 3)))
        with pytest.raises(InputError, match="empty"):
            update_coefficients(ctx, coeffs)


class TestParticipationDirections:
    def test_shares_sum_to_one_per_nonzero(self):
        bids = [
            Bid(node_id=1, phase=0, flexibility_kw=3.0, pv_capacity_kw=0.0),
            Bid(node_id=2, phase=1, flexibility_kw=1.0, pv_capacity_kw=0.0),
        ]
        dirs = participation_directions(bids, [1, 2])
        assert dirs[0, 0] == pytest.approx(0.75)
        assert dirs[1, 1] == pytest.approx(0.25)

    def test_zero_flex_gives_zero_dirs(self):
        bids = [Bid(node_id=1, phase=0, flexibility_kw=0.0, pv_capacity_kw=1.0)]
        assert not participation_directions(bids, [1]).any()


class TestMitigateRedispatch:
    def test_zero_flexibility_no_change(self):
        # All PV attacked, no flexibility: redispatch equals the attacked case.
        net, _, coeffs, d = five_node_setup()
        bids = [
            Bid(node_id=i, phase=p, flexibility_kw=0.0, pv_capacity_kw=1.0)
            for i, p in [(1, 0), (2, 1)]
        ]
        ctx = MitigationContext(
            p_pcc_forecast=np.array([2.0, 2.0, 2.0]),
            p_pcc_measured=np.array([6.0, 6.0, 6.0]),
            delta_dirs=participation_directions(bids, coeffs.node_ids),
        )
        dispatch, new_coeffs = mitigate_redispatch(
            net, bids, coeffs, ctx, d, attacked_nodes={1, 2}
        )
        assert not dispatch.g.any() and not dispatch.c.any()
        # Unmitigated attacked case: same demand, zero PV, zero curtailment.
        baseline = clear_market(assemble_acopf(net, [], coeffs, d))
        np.testing.assert_allclose(dispatch.pcc, baseline.pcc, atol=1e-6)

    def test_sufficient_flexibility_restores_import(self):
        # Lossless-ish toy where the flexibility bid covers the whole lost
        # PV: with mu small the update crushes beta, the curtailment rides
        # to its cap, and the import returns to the forecast level.
        net = two_bus(z_pu=0.01 + 0.005j)
        d = demand_array(net, {(1, 0): 8.0})
        bids = [Bid(node_id=1, phase=0, flexibility_kw=5.0, pv_capacity_kw=5.0)]
        coeffs = uniform_coefficients([1], alpha=0.5, beta=0.05, xi=1.0, mu=0.005)
        nominal = clear_market(assemble_acopf(net, bids, coeffs, d))
        assert nominal.g[1, 0] == pytest.approx(5.0, abs=0.01)  # full PV
        assert nominal.c[1, 0] <= 0.02  # no curtailment scheduled nominally
        forecast_pcc = nominal.pcc

        attacked = clear_market(
            assemble_acopf(
                net,
                [Bid(node_id=1, phase=0, flexibility_kw=5.0, pv_capacity_kw=0.0)],
                coeffs,
                d,
            )
        )
        ctx = MitigationContext(
            p_pcc_forecast=forecast_pcc,
            p_pcc_measured=attacked.pcc,
            delta_dirs=participation_directions(bids, [1]),
        )
        dispatch, _ = mitigate_redispatch(
            net, bids, coeffs, ctx, d, attacked_nodes={1}
        )
        assert dispatch.pcc.sum() <= attacked.pcc.sum() + 1e-6
        assert dispatch.c[1, 0] == pytest.approx(5.0, abs=0.02)
        assert dispatch.pcc.sum() == pytest.approx(forecast_pcc.sum(), abs=0.1)
