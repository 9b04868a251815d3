"""Config-driven experiment pipelines: single runs, speed sweeps and the
bound-verification suite. The CLI is a thin wrapper around this module;
tests drive it directly."""

import copy
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis, datasets, engine, mobility, models, rng
from .config import validate


@dataclass
class Instance:
    """Everything a run needs, resolved from an ExperimentConfig."""
    cfg: object
    spec: object
    train: object
    test: object
    shards: list
    edge_map: dict
    union: object
    network: object      # None in static degenerate mode
    vehicles: list       # None in static degenerate mode


def build_dataset(cfg):
    d = cfg.dataset
    if d.kind == "csv":
        full = datasets.load_csv(d.csv_path)
    else:
        full = datasets.generate_synthetic(d.classes, d.dim, d.samples_per_class,
                                           d.separation, d.seed,
                                           clusters_per_class=d.clusters_per_class)
    return datasets.train_test_split(full, d.test_fraction, d.seed)


def build_instance(cfg, speed=None, mobility_seed=None):
    """Resolve config into data, shards, model spec and mobility state.

    speed/mobility_seed override the config (used by sweeps, which hold
    everything else fixed)."""
    validate(cfg)
    pt, mo, md = cfg.partition, cfg.mobility, cfg.model
    v = mo.speed if speed is None else float(speed)
    mseed = mo.seed if mobility_seed is None else int(mobility_seed)

    if pt.shared_input:
        shards, edge_map = datasets.shared_input_shards(
            pt.vehicles, mo.edges, pt.classes_per_unit, cfg.dataset.classes,
            pt.shared_samples_per_shard, cfg.dataset.dim, pt.seed)
        train = test = None
    else:
        train, test = build_dataset(cfg)
        pspec = datasets.PartitionSpec(
            regime=pt.regime, vehicle_count=pt.vehicles, edge_count=mo.edges,
            classes_per_unit=pt.classes_per_unit, seed=pt.seed,
            allow_partial_class_coverage=pt.allow_partial_class_coverage)
        shards, edge_map = datasets.partition(train, pspec)
    union = datasets.union_of_shards(shards)

    spec = models.ModelSpec(family=md.family, dim=union.dim,
                            class_count=union.class_count,
                            l2_reg=md.l2_reg, hidden_width=md.hidden_width)
    if mo.edges == 1:
        network, vehicles = None, None
    else:
        network = mobility.RoadNetwork(side_length=mo.side_length,
                                       edge_count=mo.edges,
                                       intersection_zone=mo.intersection_zone,
                                       slowdown_factor=mo.slowdown_factor)
        # edge-skewed data pins vehicles to their data's side initially
        assignment = edge_map if (pt.regime == datasets.EDGE_NONIID or pt.shared_input) else None
        vehicles = mobility.init_positions(network, pt.vehicles, v, mseed,
                                           edge_assignment=assignment)
    return Instance(cfg=cfg, spec=spec, train=train, test=test, shards=shards,
                    edge_map=edge_map, union=union, network=network, vehicles=vehicles)


def hfl_config(cfg, **overrides):
    h = cfg.hfl
    kw = dict(eta=h.eta, tau_l=h.tau_l, tau_e=h.tau_e, cloud_epochs=h.cloud_epochs,
              batch_size=h.batch_size, seed=h.seed, record_virtual=h.record_virtual,
              full_batch=h.full_batch)
    kw.update(overrides)
    return engine.HflConfig(**kw)


def run_instance(inst, init_params_vec=None, **config_overrides):
    rc = hfl_config(inst.cfg, **config_overrides)
    return engine.run(rc, inst.shards, inst.spec,
                      network=inst.network, vehicles=inst.vehicles,
                      edge_count=inst.cfg.mobility.edges,
                      p_turn=inst.cfg.mobility.p_turn,
                      eval_data=inst.test, union_data=inst.union,
                      init_params_vec=init_params_vec)


def run_from_config(cfg, **overrides):
    inst = build_instance(cfg)
    return inst, run_instance(inst, **overrides)


# --- accuracy targets and sweep machinery ---------------------------------

def centralized_ceiling(inst):
    """Test accuracy of the centrally trained model; the reference the
    relative accuracy targets are scaled against.

    Convex families use the exact optimum. For mlp1 the ceiling is the
    best accuracy of a deterministic centralized SGD run (one vehicle
    holding the full training set, same step size and batch size, same
    iteration budget as the federated run)."""
    if inst.spec.is_convex:
        opt = models.solve_optimum(inst.spec, inst.union)
        return models.accuracy(inst.spec, opt.w, inst.test), opt
    h = inst.cfg.hfl
    rc = engine.HflConfig(eta=h.eta, tau_l=h.tau_l, tau_e=h.tau_e,
                          cloud_epochs=h.cloud_epochs, batch_size=h.batch_size,
                          seed=h.seed)
    shard = datasets.Shard(0, inst.union)
    res = engine.run(rc, [shard], inst.spec, network=None, edge_count=1,
                     eval_data=inst.test, union_data=inst.union)
    best = max(r.test_accuracy for r in res.metrics)
    return float(best), None


def rounds_to_targets(metrics, targets, tau_e):
    """First cloud epoch whose running max accuracy reaches each target;
    None when never reached."""
    out = []
    for t in targets:
        hit = None
        for row in metrics:
            if row.test_accuracy >= t:
                hit = (row.edge_round + tau_e - 1) // tau_e
                break
        out.append(hit)
    return out


@dataclass
class SweepCell:
    speed: float
    seed: int
    max_test_accuracy: float
    rounds_to_target: list        # aligned with targets; None = never
    delta_first_quarter: float = float("nan")
    delta_last_quarter: float = float("nan")


@dataclass
class SweepResult:
    speeds: list
    seeds: list
    targets: list                 # absolute accuracy targets
    target_fractions: list
    ceiling: float
    cells: list = field(default_factory=list)

    def cell(self, speed, seed):
        for c in self.cells:
            if c.speed == speed and c.seed == seed:
                return c
        raise KeyError((speed, seed))

    def mean_max_accuracy(self, speed):
        return float(np.mean([c.max_test_accuracy for c in self.cells if c.speed == speed]))

    def csv_rows(self):
        head = ["speed", "seed", "max_test_accuracy"]
        head += [f"rounds_to_{f:g}x" for f in self.target_fractions]
        head += ["delta_first_quarter_mean", "delta_last_quarter_mean"]
        rows = [head]
        for c in self.cells:
            r = [repr(float(c.speed)), str(c.seed), repr(c.max_test_accuracy)]
            r += ["" if v is None else str(v) for v in c.rounds_to_target]
            r += ["" if math.isnan(c.delta_first_quarter) else repr(c.delta_first_quarter),
                  "" if math.isnan(c.delta_last_quarter) else repr(c.delta_last_quarter)]
            rows.append(r)
        return rows

    def summary_rows(self):
        rows = [["speed", "mean_max_accuracy", "std_max_accuracy"]]
        for v in self.speeds:
            accs = [c.max_test_accuracy for c in self.cells if c.speed == v]
            rows.append([repr(float(v)), repr(float(np.mean(accs))),
                         repr(float(np.std(accs)))])
        return rows


DEFAULT_TARGET_FRACTIONS = (0.65, 0.70, 0.75)


def _sweep_cell(cfg, speed, seed, targets, init_params_vec):
    inst = build_instance(cfg, speed=speed, mobility_seed=seed)
    res = run_instance(inst, init_params_vec=init_params_vec)
    accs = np.array([r.test_accuracy for r in res.metrics])
    best = float(np.max(accs[~np.isnan(accs)])) if np.any(~np.isnan(accs)) else float("nan")
    cell = SweepCell(speed=float(speed), seed=int(seed),
                     max_test_accuracy=best,
                     rounds_to_target=rounds_to_targets(res.metrics, targets,
                                                        cfg.hfl.tau_e))
    if res.trace is not None:
        probes = np.vstack([np.zeros(res.trace.vtilde.shape[1]), res.trace.vtilde[-1]])
        est = analysis.estimates_for_trace(inst.spec, inst.shards, res.trace, probes)
        mix = analysis.mobility_mixing_report(est)
        cell.delta_first_quarter = mix.first_quarter_mean
        cell.delta_last_quarter = mix.last_quarter_mean
    return cell


def sweep_speed(cfg, speeds, seeds, target_fractions=DEFAULT_TARGET_FRACTIONS,
                init_params_vec=None, parallel=1, on_cell=None):
    """Cross product over (speed, seed), everything else held fixed.

    Mobility-only pairing: the partition, batch streams and initial
    placement seed are shared across speeds so that accuracy differences
    isolate the mobility effect.
    """
    if len(speeds) < 1 or len(seeds) < 1:
        raise ValueError("need at least one speed and one seed")
    base = build_instance(cfg)
    ceiling, _ = centralized_ceiling(base) if base.test is not None else (float("nan"), None)
    targets = [f * ceiling for f in target_fractions]
    result = SweepResult(speeds=[float(v) for v in speeds], seeds=[int(s) for s in seeds],
                         targets=targets, target_fractions=list(target_fractions),
                         ceiling=ceiling)
    jobs = [(v, s) for v in speeds for s in seeds]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            futs = {ex.submit(_sweep_cell, cfg, v, s, targets, init_params_vec): (v, s)
                    for v, s in jobs}
            done = {}
            for fut, key in futs.items():
                done[key] = fut.result()
                if on_cell:
                    on_cell(done[key])
            result.cells = [done[key] for key in jobs]
    else:
        for v, s in jobs:
            cell = _sweep_cell(cfg, v, s, targets, init_params_vec)
            result.cells.append(cell)
            if on_cell:
                on_cell(cell)
    return result


def pretrain_checkpoint(cfg, accuracy_target, max_epochs=200):
    """Train on an iid split of the same dataset at v=0 until the test
    accuracy reaches the target; returns the cloud model."""
    pre = copy.deepcopy(cfg)
    pre.partition.regime = datasets.IID
    pre.partition.shared_input = False
    pre.mobility.speed = 0.0
    pre.hfl.record_virtual = False
    inst = build_instance(pre)
    rc = hfl_config(pre, cloud_epochs=max_epochs)
    best = None
    res = engine.run(rc, inst.shards, inst.spec, network=inst.network,
                     vehicles=inst.vehicles, edge_count=pre.mobility.edges,
                     p_turn=pre.mobility.p_turn, eval_data=inst.test,
                     union_data=inst.union)
    # replay the metrics to find the first epoch at target, then rerun to it
    for row in res.metrics:
        if row.test_accuracy >= accuracy_target:
            epochs = (row.edge_round + pre.hfl.tau_e - 1) // pre.hfl.tau_e
            rc2 = hfl_config(pre, cloud_epochs=max(1, epochs))
            res2 = engine.run(rc2, inst.shards, inst.spec, network=inst.network,
                              vehicles=inst.vehicles, edge_count=pre.mobility.edges,
                              p_turn=pre.mobility.p_turn, eval_data=inst.test,
                              union_data=inst.union)
            best = res2.final_state.cloud_params
            break
    if best is None:
        raise RuntimeError(
            f"pretraining never reached accuracy {accuracy_target:.3f} "
            f"within {max_epochs} cloud epochs")
    return best


# --- bound verification ----------------------------------------------------

@dataclass
class BoundSuite:
    inputs: object
    estimates: object
    drift_report: object
    gap_report: object
    violations: list
    mixing: object

    @property
    def ok(self):
        return not self.violations


def verify_bounds(cfg, delta_scale=1.0, slack=analysis.DEFAULT_SLACK):
    """Full-batch convex run, divergence estimation and every inequality
    check. delta_scale is a test hook: scaling the estimated delta_m
    down must make the checker report violations."""
    inst = build_instance(cfg)
    if not inst.spec.is_convex:
        raise models.UnsupportedModelError("bound verification needs a convex family")
    res = run_instance(inst, record_virtual=True, full_batch=True)
    tr = res.trace

    opt = models.solve_optimum(inst.spec, inst.union)
    # probes: the full centralized trajectory (vtilde everywhere, and u at
    # cloud instants where v synchronizes to it), plus the origin and the
    # optimum; this is exactly where the recursion evaluates gradients
    probes = np.vstack([tr.vtilde, tr.u_cloud, np.zeros(tr.vtilde.shape[1]), opt.w])
    est = analysis.estimates_for_trace(inst.spec, inst.shards, tr, probes)
    if delta_scale != 1.0:
        est.delta_m = est.delta_m * delta_scale
        est.delta = float(est.alpha @ est.delta_m)
        occupied = ~np.isnan(est.delta_n_bracket)
        est.delta_n_bracket = np.where(occupied, est.delta_n_bracket * delta_scale, np.nan)
        est.Delta_n_bracket = np.where(occupied, est.Delta_n_bracket * delta_scale, np.nan)
        est.Delta_bracket = est.Delta_bracket * delta_scale

    sm = models.estimate_constants(inst.spec, inst.union, probes=list(tr.vtilde))
    eps = analysis.choose_epsilon(inst.spec, inst.union, tr, opt.value,
                                  cfg.hfl.tau_l, cfg.hfl.tau_e, cfg.hfl.cloud_epochs)
    inputs = analysis.BoundInputs(
        beta=sm.beta, rho=sm.rho, eta=cfg.hfl.eta, tau_l=cfg.hfl.tau_l,
        tau_e=cfg.hfl.tau_e, cloud_epochs=cfg.hfl.cloud_epochs,
        epsilon=max(eps, 1e-12), w_star=opt.w, f_star=opt.value)

    violations = []
    violations += analysis.check_vehicle_drift(tr, est, inputs, slack)
    violations += analysis.check_edge_drift(tr, est, inputs, slack)
    violations += analysis.check_recursion(tr, inputs, slack)
    vt, drift_report = analysis.check_central_drift(tr, est, inputs, slack)
    violations += vt
    gap = analysis.check_gap_bound(inst.spec, inst.union, tr, inputs, drift_report)
    if gap.applicable and gap.measured_gap > gap.bound + slack:
        violations.append(analysis.Violation("gap_bound", {"T": tr.total_iterations},
                                             gap.measured_gap, gap.bound))
    mixing = analysis.mobility_mixing_report(est)
    return BoundSuite(inputs=inputs, estimates=est, drift_report=drift_report,
                      gap_report=gap, violations=violations, mixing=mixing)


def bound_summary_json(suite):
    return analysis.summary_json(suite.inputs, suite.estimates, suite.gap_report)


def mobility_trace(cfg, rounds):
    """Vehicle trajectory rows without training: one row per vehicle per
    1-second edge round."""
    inst = build_instance(cfg)
    if inst.network is None:
        raise ValueError("mobility trace needs the square topology (edges = 4)")
    snaps, states = [], []
    veh = inst.vehicles
    snaps.append(mobility.associate(inst.network, veh, time=0.0))
    states.append(veh)
    turn_rng = None
    if cfg.mobility.p_turn > 0:
        turn_rng = rng.stream(cfg.hfl.seed, rng.MOBILITY_TURNS)
    for j in range(1, rounds + 1):
        veh = mobility.advance(inst.network, veh, dt=1.0,
                               p_turn=cfg.mobility.p_turn, turn_rng=turn_rng)
        snaps.append(mobility.associate(inst.network, veh, time=float(j)))
        states.append(veh)
    return mobility.trace_rows(snaps, states)


def to_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True)
