from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hflsim import analysis, datasets, engine, mobility, models
from hflsim.analysis import (
    BoundInputs, build_drift_report, central_drift_bound, check_central_drift,
    check_edge_drift, check_gap_bound, check_recursion, check_vehicle_drift,
    choose_epsilon, convex_combination_residuals, drift_bound, drift_polynomial,
    edge_drift_bound, estimate_divergences, estimates_for_trace,
    mobility_mixing_report, shared_input_delta_m, vehicle_drift_bound,
)


def poly_fraction(tau, eta, delta, beta):
    """Exact-rational oracle for the drift polynomial."""
    eta, delta, beta = Fraction(eta), Fraction(delta), Fraction(beta)
    return float(delta / beta * ((1 + eta * beta) ** tau - 1) - tau * eta * delta)


def drift_fraction(k, tau_l, tau_e, eta, delta, beta, Delta):
    """Term-by-term rational evaluation of the drift-plus-mixing bound."""
    eta, delta, beta = Fraction(eta), Fraction(delta), Fraction(beta)
    r = delta / beta * ((1 + eta * beta) ** (tau_l * tau_e) - 1) - tau_l * tau_e * eta * delta
    s = sum(Fraction(j) * Fraction(Delta[k * tau_e + j]) for j in range(1, tau_e))
    return float(r - eta * tau_l * (Fraction(tau_e * (tau_e - 1), 2) * delta - s))


class TestDriftPolynomial:
    def test_zero_steps(self):
        assert drift_polynomial(0, 0.1, 2.0, 1.5) == 0.0

    def test_one_step_cancels(self):
        assert drift_polynomial(1, 0.1, 2.0, 1.5) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        # (1/1)*((1.1)^2 - 1) - 2*0.1*1 = 0.01
        assert drift_polynomial(2, 0.1, 1.0, 1.0) == pytest.approx(0.01, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(tau=st.integers(0, 40), eta=st.floats(1e-4, 0.5),
           delta=st.floats(0.0, 5.0), beta=st.floats(0.1, 4.0))
    def test_matches_rational_oracle(self, tau, eta, delta, beta):
        got = drift_polynomial(tau, eta, delta, beta)
        want = poly_fraction(tau, eta, delta, beta)
        assert got == pytest.approx(want, rel=1e-10, abs=1e-10)


def make_inputs(eta=0.1, beta=1.0, tau_l=6, tau_e=10, K=3, eps=1.0):
    return BoundInputs(beta=beta, rho=1.0, eta=eta, tau_l=tau_l, tau_e=tau_e,
                       cloud_epochs=K, epsilon=eps, w_star=np.zeros(2), f_star=0.0)


def const_estimates(delta, Delta, tau_l, brackets, N=1):
    est = analysis.DivergenceEstimates(
        tau_l=tau_l, delta_m=np.array([delta]), delta=delta, alpha=np.array([1.0]),
        delta_n_bracket=np.full((brackets, N), delta),
        Delta_n_bracket=np.full((brackets, N), Delta),
        Delta_bracket=np.full(brackets, Delta),
        theta_bracket=np.full((brackets, N), 1.0), probe_count=1)
    return est


class TestComputeUk:
    def test_delta_equals_Delta_reduces_to_r(self):
        inputs = make_inputs(eta=0.05, beta=2.0)
        est = const_estimates(delta=0.7, Delta=0.7, tau_l=6, brackets=40)
        value, r_term, mob = central_drift_bound(0, est, inputs)
        assert mob == pytest.approx(0.0, abs=1e-12)
        assert value == pytest.approx(drift_polynomial(60, 0.05, 0.7, 2.0), rel=1e-12)

    def test_zero_Delta_substitution(self):
        inputs = make_inputs(eta=0.05, beta=2.0)
        est = const_estimates(delta=0.7, Delta=0.0, tau_l=6, brackets=40)
        value, r_term, mob = central_drift_bound(0, est, inputs)
        want = drift_polynomial(60, 0.05, 0.7, 2.0) - 0.5 * 0.05 * 6 * 10 * 9 * 0.7
        assert value == pytest.approx(want, rel=1e-12)

    def test_tau_e_one_empty_sum(self):
        inputs = make_inputs(eta=0.05, beta=2.0, tau_l=6, tau_e=1)
        est = const_estimates(delta=0.7, Delta=0.3, tau_l=6, brackets=5)
        value, r_term, mob = central_drift_bound(2, est, inputs)
        assert mob == 0.0
        assert value == pytest.approx(drift_polynomial(6, 0.05, 0.7, 2.0), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(0, 2), eta=st.floats(0.01, 0.2), delta=st.floats(0.0, 2.0),
           beta=st.floats(0.5, 3.0), seed=st.integers(0, 100))
    def test_rational_term_by_term_oracle(self, k, eta, delta, beta, seed):
        tau_l, tau_e = 3, 4
        g = np.random.default_rng(seed)
        Delta = g.uniform(0.0, delta if delta > 0 else 1.0, size=20)
        inputs = make_inputs(eta=eta, beta=beta, tau_l=tau_l, tau_e=tau_e)
        est = const_estimates(delta=delta, Delta=0.0, tau_l=tau_l, brackets=20)
        est.Delta_bracket = Delta
        value, _, _ = central_drift_bound(k, est, inputs)
        want = drift_fraction(k, tau_l, tau_e, eta, delta, beta, Delta)
        assert value == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_monotone_in_each_Delta(self):
        inputs = make_inputs(eta=0.05, beta=2.0)
        est = const_estimates(delta=0.7, Delta=0.3, tau_l=6, brackets=40)
        base, _, _ = central_drift_bound(0, est, inputs)
        for j in range(1, inputs.tau_e):
            bumped = const_estimates(delta=0.7, Delta=0.3, tau_l=6, brackets=40)
            bumped.Delta_bracket = bumped.Delta_bracket.copy()
            bumped.Delta_bracket[j] += 0.1
            up, _, _ = central_drift_bound(0, bumped, inputs)
            assert up > base

    def test_missing_brackets_raise(self):
        inputs = make_inputs()
        est = const_estimates(delta=0.7, Delta=0.3, tau_l=6, brackets=5)
        with pytest.raises(ValueError):
            central_drift_bound(3, est, inputs)


class TestDriftBounds:
    def test_zero_divergence_zero_bound(self):
        for tau0 in (1, 5, 60):
            assert vehicle_drift_bound(tau0, 0.0, 0.1, 1.0) == 0.0

    def test_edge_bound_reduces_to_vehicle_form(self):
        b3 = edge_drift_bound(7, 0.5, 0.5, 0.1, 2.0)
        b2 = vehicle_drift_bound(7, 0.5, 0.1, 2.0)
        assert b3 == pytest.approx(b2, rel=1e-12)

    def test_hand_value(self):
        # 2/1 * ((1.1)^2 - 1) = 0.42
        assert vehicle_drift_bound(2, 2.0, 0.1, 1.0) == pytest.approx(0.42, abs=1e-12)

    def test_dispatcher(self):
        inputs = make_inputs(eta=0.1, beta=1.0)
        est = const_estimates(delta=2.0, Delta=1.0, tau_l=6, brackets=40)
        assert drift_bound(2, est, inputs, vehicle=0) == pytest.approx(0.42, abs=1e-12)
        got = drift_bound(2, est, inputs, edge=0, tau=12)
        want = edge_drift_bound(2, 2.0, 1.0, 0.1, 1.0)
        assert got == pytest.approx(want, rel=1e-12)
        with pytest.raises(ValueError):
            drift_bound(0, est, inputs, vehicle=0)
        with pytest.raises(ValueError):
            drift_bound(2, est, inputs)


class TestEstimateDivergences:
    def test_identical_shards_zero(self):
        base = datasets.generate_synthetic(3, 5, 40, 3.0, seed=4)
        shards = [datasets.Shard(m, base) for m in range(4)]
        spec = models.ModelSpec(models.MULTINOMIAL_LOGISTIC, dim=5, class_count=3)
        hist = np.zeros((1, 4), dtype=np.int64)
        probes = [np.zeros(models.param_length(spec)), np.ones(models.param_length(spec))]
        est = estimate_divergences(spec, shards, hist, probes, tau_l=6)
        assert np.max(est.delta_m) <= 1e-12
        assert est.delta <= 1e-12
        assert np.nanmax(est.Delta_bracket) <= 1e-12

    def test_shared_input_closed_form(self):
        shards, emap = datasets.shared_input_shards(8, 4, 1, 4, 30, 6, seed=2)
        spec = models.ModelSpec(models.QUADRATIC, dim=6, class_count=4, l2_reg=0.1)
        hist = np.array([[emap[m] for m in range(8)]])
        g = np.random.default_rng(0)
        probes = [g.normal(size=24) for _ in range(3)]
        est = estimate_divergences(spec, shards, hist, probes, tau_l=6)
        exact = shared_input_delta_m(shards)
        assert np.max(np.abs(est.delta_m - exact)) <= 1e-10

    def test_iid_below_edge_noniid(self):
        ds = datasets.generate_synthetic(4, 6, 800, 3.0, seed=21)
        spec = models.ModelSpec(models.QUADRATIC, dim=6, class_count=4, l2_reg=0.05)
        probes = [np.zeros(24)]
        sh_i, em_i = datasets.partition(ds, datasets.PartitionSpec(
            datasets.IID, vehicle_count=32, edge_count=4, seed=22))
        sh_e, em_e = datasets.partition(ds, datasets.PartitionSpec(
            datasets.EDGE_NONIID, vehicle_count=32, edge_count=4,
            classes_per_unit=1, seed=22))
        hist_i = np.array([[em_i[m] for m in range(32)]])
        hist_e = np.array([[em_e[m] for m in range(32)]])
        est_i = estimate_divergences(spec, sh_i, hist_i, probes, tau_l=6)
        est_e = estimate_divergences(spec, sh_e, hist_e, probes, tau_l=6)
        assert est_i.delta_m.max() < est_e.delta_m.max()
        # the edge-level divergence collapses for iid partitions
        assert est_i.Delta_bracket[0] < 0.05 * est_e.Delta_bracket[0]

    def test_convex_combination_identities(self):
        shards, emap = datasets.shared_input_shards(8, 4, 2, 4, 30, 6, seed=5)
        spec = models.ModelSpec(models.QUADRATIC, dim=6, class_count=4, l2_reg=0.1)
        hist = np.array([[emap[m] for m in range(8)], [(emap[m] + 1) % 4 for m in range(8)]])
        probes = [np.zeros(24), np.ones(24)]
        est = estimate_divergences(spec, shards, hist, probes, tau_l=6)
        assert convex_combination_residuals(est) <= 1e-12

    def test_aggregates_are_convex_combinations(self):
        shards, emap = datasets.shared_input_shards(8, 4, 2, 4, 30, 6, seed=5)
        spec = models.ModelSpec(models.QUADRATIC, dim=6, class_count=4, l2_reg=0.1)
        hist = np.array([[emap[m] for m in range(8)]])
        est = estimate_divergences(spec, shards, hist, [np.zeros(24)], tau_l=6)
        assert est.delta <= est.delta_m.max() + 1e-12
        valid = ~np.isnan(est.delta_n_bracket)
        assert np.all(est.delta_n_bracket[valid] <= est.delta_m.max() + 1e-12)

    def test_mlp_rejected(self):
        spec = models.ModelSpec(models.MLP1, dim=4, class_count=3, hidden_width=4)
        base = datasets.generate_synthetic(3, 4, 10, 3.0, seed=4)
        with pytest.raises(models.UnsupportedModelError):
            estimate_divergences(spec, [datasets.Shard(0, base)],
                                 np.zeros((1, 1), dtype=int), [np.zeros(1)])


def bound_suite_run(speed, K=4, eta=0.05, seed=13):
    shards, emap = datasets.shared_input_shards(32, 4, 1, 4, 40, 8, seed=5)
    spec = models.ModelSpec(models.QUADRATIC, dim=8, class_count=4, l2_reg=0.05)
    net = mobility.RoadNetwork()
    veh = mobility.init_positions(net, 32, speed=speed, seed=11, edge_assignment=emap)
    cfg = engine.HflConfig(eta=eta, tau_l=6, tau_e=10, cloud_epochs=K, seed=seed,
                           record_virtual=True, full_batch=True)
    res = engine.run(cfg, shards, spec, network=net, vehicles=veh)
    union = datasets.union_of_shards(shards)
    opt = models.solve_optimum(spec, union)
    tr = res.trace
    probes = np.vstack([tr.vtilde, np.zeros(tr.vtilde.shape[1]), opt.w])
    est = estimates_for_trace(spec, shards, tr, probes)
    sm = models.estimate_constants(spec, union, probes=list(tr.vtilde))
    eps = choose_epsilon(spec, union, tr, opt.value, 6, 10, K)
    inputs = BoundInputs(beta=sm.beta, rho=sm.rho, eta=eta, tau_l=6, tau_e=10,
                         cloud_epochs=K, epsilon=max(eps, 1e-12),
                         w_star=opt.w, f_star=opt.value)
    return spec, union, tr, est, inputs


class TestInequalitySuite:
    def test_all_checks_pass_on_construction(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=30.0)
        assert check_vehicle_drift(tr, est, inputs) == []
        assert check_edge_drift(tr, est, inputs) == []
        assert check_recursion(tr, inputs) == []
        viols, report = check_central_drift(tr, est, inputs)
        assert viols == []
        assert all(e.satisfied for e in report.entries)

    def test_corrupted_delta_detected(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=0.0, K=2)
        est.delta_m = est.delta_m * 0.5
        est.delta *= 0.5
        est.delta_n_bracket = est.delta_n_bracket * 0.5
        est.Delta_n_bracket = est.Delta_n_bracket * 0.5
        est.Delta_bracket = est.Delta_bracket * 0.5
        viols = check_vehicle_drift(tr, est, inputs) + check_edge_drift(tr, est, inputs)
        assert len(viols) > 0

    def test_recursion_zero_after_cloud_instant(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=30.0, K=2)
        span = inputs.tau_l * inputs.tau_e
        for k in range(inputs.cloud_epochs):
            assert tr.gap_u_vtilde[k * span + 1] <= 1e-9


class TestGapBound:
    def test_eta_above_one_over_beta_not_applicable(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=0.0, K=2)
        inputs.beta = 2.0 / inputs.eta  # force eta > 1/beta
        report_uk = build_drift_report(tr, est, inputs)
        gr = check_gap_bound(spec, union, tr, inputs, report_uk)
        assert not gr.applicable
        assert not gr.conditions["eta_le_inv_beta"]
        assert np.isnan(gr.bound)

    def test_homogeneous_reduces_to_descent_bound(self):
        base = datasets.generate_synthetic(3, 5, 40, 3.0, seed=4)
        shards = [datasets.Shard(m, base) for m in range(4)]
        spec = models.ModelSpec(models.MULTINOMIAL_LOGISTIC, dim=5, class_count=3,
                                l2_reg=0.1)
        cfg = engine.HflConfig(eta=0.2, tau_l=2, tau_e=2, cloud_epochs=3, seed=3,
                               record_virtual=True, full_batch=True)
        res = engine.run(cfg, shards, spec, network=None, edge_count=1)
        tr = res.trace
        union = datasets.union_of_shards(shards)
        opt = models.solve_optimum(spec, union)
        probes = np.vstack([tr.vtilde, np.zeros(tr.vtilde.shape[1]), opt.w])
        est = estimates_for_trace(spec, shards, tr, probes)
        assert est.delta <= 1e-12
        sm = models.estimate_constants(spec, union, probes=list(tr.vtilde))
        eps = choose_epsilon(spec, union, tr, opt.value, 2, 2, 3)
        inputs = BoundInputs(beta=sm.beta, rho=sm.rho, eta=0.2, tau_l=2, tau_e=2,
                             cloud_epochs=3, epsilon=max(eps, 1e-12),
                             w_star=opt.w, f_star=opt.value)
        uk = build_drift_report(tr, est, inputs)
        assert uk.total == pytest.approx(0.0, abs=1e-10)
        gr = check_gap_bound(spec, union, tr, inputs, uk)
        if gr.applicable:
            T = 12
            assert gr.bound == pytest.approx(1.0 / (T * 0.2 * gr.phi), rel=1e-6)
            assert gr.measured_gap <= gr.bound

    def test_degenerate_start_at_optimum(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=0.0, K=2)
        opt_w = tr.vtilde[0].copy()  # pretend the start is the optimum
        inputs.w_star = opt_w
        uk = build_drift_report(tr, est, inputs)
        gr = check_gap_bound(spec, union, tr, inputs, uk)
        assert gr.degenerate
        assert not gr.applicable
        assert "optimal" in gr.note

    def test_uk_premise_gate(self):
        spec, union, tr, est, inputs = bound_suite_run(speed=0.0, K=2)
        uk = build_drift_report(tr, est, inputs)
        for e in uk.entries:
            e.value = -1.0  # unsatisfiable premise
            e.satisfied = False
        gr = check_gap_bound(spec, union, tr, inputs, uk)
        assert not gr.conditions["uk_upper_bounds_gap"]
        assert not gr.applicable


class TestMixingReport:
    def test_static_membership_constant(self):
        est = const_estimates(delta=1.0, Delta=0.4, tau_l=6, brackets=40)
        mix = mobility_mixing_report(est)
        assert mix.first_quarter_mean == pytest.approx(mix.last_quarter_mean, rel=1e-12)

    def test_mixing_decreases_delta_trajectory(self):
        shards, emap = datasets.shared_input_shards(32, 4, 1, 4, 40, 8, seed=5)
        spec = models.ModelSpec(models.QUADRATIC, dim=8, class_count=4, l2_reg=0.05)
        net = mobility.RoadNetwork()
        veh = mobility.init_positions(net, 32, speed=30.0, seed=11,
                                      edge_assignment=emap)
        hist = [mobility.associate(net, veh).edge_of]
        for _ in range(100):
            veh = mobility.advance(net, veh, dt=1.0)
            hist.append(mobility.associate(net, veh).edge_of)
        est = estimate_divergences(spec, shards, np.stack(hist),
                                   [np.zeros(32)], tau_l=6)
        mix = mobility_mixing_report(est)
        assert mix.last_quarter_mean < mix.first_quarter_mean
