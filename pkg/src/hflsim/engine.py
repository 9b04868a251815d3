"""Hierarchical federated training with mobile clients.

Schedule per edge round: tau_l local SGD steps on every vehicle, one
1-second mobility advance, re-association, edge aggregation; every tau_e-th
edge round is followed by a cloud aggregation. Aggregation weights are
data-size proportional and always use the association snapshot taken at
the aggregation instant.

When record_virtual is on, the run also materializes the virtual
trajectories used by the analysis module: u (size-weighted average of all
vehicle models at every iteration), the centralized descent v, and its
pre-synchronization value vtilde.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import mobility, rng
from .datasets import union_of_shards
from .models import (accuracy, gradient_xy, init_params, loss, param_length,
                     write_param_vector, read_param_vector)

CHECKPOINT_MAGIC = b"HFLCKPT1"


class DivergenceError(RuntimeError):
    """Parameters became non-finite; message names vehicle and iteration."""


class InternalInvariantError(AssertionError):
    """A weight-sum or bookkeeping invariant was violated."""


@dataclass
class HflConfig:
    eta: float = 0.1
    tau_l: int = 6
    tau_e: int = 10
    cloud_epochs: int = 1  # K
    batch_size: int = 20
    seed: int = 0
    record_virtual: bool = False
    full_batch: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.tau_l < 1 or self.tau_e < 1 or self.cloud_epochs < 1:
            raise ValueError("tau_l, tau_e and cloud_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_iterations(self):
        return self.cloud_epochs * self.tau_l * self.tau_e


class BatchSampler:
    """Per-vehicle minibatch index streams.

    Each vehicle samples without replacement within a pass: a seeded
    permutation of its shard is consumed in batch_size chunks, the
    incomplete tail is dropped, and the next pass reshuffles. The stream
    for vehicle m depends only on (seed, m) and the number of batches
    already drawn, so runs are reproducible.
    """

    def __init__(self, shard_sizes, batch_size, seed, full_batch=False):
        self.sizes = list(shard_sizes)
        self.batch_size = batch_size
        self.full_batch = full_batch
        self._gens = [rng.stream(seed, rng.BATCH_BASE + m) for m in range(len(self.sizes))]
        self._perm = [None] * len(self.sizes)
        self._cursor = [0] * len(self.sizes)

    def next_batch(self, m):
        n = self.sizes[m]
        if self.full_batch or self.batch_size >= n:
            return np.arange(n)
        b = self.batch_size
        if self._perm[m] is None or self._cursor[m] + b > n:
            self._perm[m] = self._gens[m].permutation(n)
            self._cursor[m] = 0
        idx = self._perm[m][self._cursor[m]:self._cursor[m] + b]
        self._cursor[m] += b
        return idx


def local_update(spec, shard, w, batch_idx, eta, vehicle=None, iteration=None):
    """One SGD step on the given batch of the shard."""
    X = shard.data.features[batch_idx]
    y = shard.data.labels[batch_idx]
    w_new = w - eta * gradient_xy(spec, w, X, y)
    if not np.all(np.isfinite(w_new)):
        raise DivergenceError(
            f"non-finite parameters at vehicle {vehicle} iteration {iteration}")
    return w_new


def edge_weights(members, shard_sizes):
    """alpha_{m,n}: shard size over the edge's total, in member-id order."""
    total = sum(shard_sizes[m] for m in members)
    return np.array([shard_sizes[m] / total for m in members])


def edge_aggregate(members, vehicle_params, shard_sizes):
    """Size-weighted average of the member models, fixed id-order sum."""
    if len(members) == 0:
        raise ValueError("edge_aggregate requires a nonempty member set")
    members = sorted(members)
    w = edge_weights(members, shard_sizes)
    acc = np.zeros_like(vehicle_params[members[0]])
    for wi, m in zip(w, members):
        acc += wi * vehicle_params[m]
    return acc


def cloud_aggregate(edge_params, theta):
    """theta-weighted average of edge models; theta must sum to one."""
    s = float(np.sum(theta))
    if abs(s - 1.0) > 1e-9:
        raise InternalInvariantError(f"edge weights sum to {s}, expected 1")
    acc = np.zeros_like(edge_params[0])
    for t, wn in zip(theta, edge_params):
        if t != 0.0:
            acc += t * wn
    return acc


@dataclass
class FleetState:
    tau: int
    vehicle_params: np.ndarray  # (M, P)
    edge_params: np.ndarray     # (N, P)
    cloud_params: np.ndarray    # (P,)


@dataclass
class MetricsRow:
    cloud_epoch: int
    edge_round: int
    iteration: int
    train_loss: float
    test_accuracy: float       # nan when no eval split was given
    u_vtilde_gap: float        # nan when virtual recording is off
    membership_counts: tuple

    def csv_fields(self):
        def num(x):
            return "" if np.isnan(x) else repr(float(x))
        return [str(self.cloud_epoch), str(self.edge_round), str(self.iteration),
                repr(float(self.train_loss)), num(self.test_accuracy),
                num(self.u_vtilde_gap),
                ";".join(str(int(c)) for c in self.membership_counts)]


METRICS_HEADER = ["cloud_epoch", "edge_round", "iteration", "train_loss",
                  "test_accuracy", "u_vtilde_gap", "edge_membership_counts"]


@dataclass
class VirtualTrace:
    """Per-iteration records of the virtual trajectories.

    Index 0 is the shared initialization. "pre" quantities are taken
    before the aggregation at an aggregation instant (the SGD-evolved
    local models), matching the recursion the bounds are stated for;
    "post" quantities after aggregation and synchronization.
    """
    eta: float
    tau_l: int
    tau_e: int
    cloud_epochs: int
    alpha: np.ndarray             # (M,) size weights
    shard_sizes: np.ndarray       # (M,)
    vtilde: np.ndarray            # (T+1, P); row 0 = w0
    gap_u_vtilde: np.ndarray      # (T+1,)  ||u_pre - vtilde||
    gap_u_v: np.ndarray           # (T+1,)  ||u_post - v_post||
    s_vehicle: np.ndarray         # (T+1,)  sum_m alpha_m ||w_m_post - v_post||
    s_edge: np.ndarray            # (T+1,)  sum_n theta_n ||u_n_post - v_post||
    vehicle_gap: np.ndarray       # (M, T+1) ||w_m_pre - vtilde||
    edge_gap: np.ndarray          # (N, T+1) ||u_n_pre - vtilde||, nan for empty edges
    u_cloud: np.ndarray           # (K+1, P) u_post at cloud instants; row 0 = w0
    association_history: np.ndarray  # (K*tau_e + 1, M) edge index per round

    def membership_at(self, tau):
        """Association snapshot in force at local iteration tau."""
        return self.association_history[tau // self.tau_l]

    @property
    def total_iterations(self):
        return self.cloud_epochs * self.tau_l * self.tau_e


@dataclass
class RunResult:
    metrics: list
    final_state: FleetState
    trace: VirtualTrace = None
    cloud_consistency: list = field(default_factory=list)  # (k, max |w - u_pre|) per epoch

    def metrics_csv_rows(self):
        return [METRICS_HEADER] + [r.csv_fields() for r in self.metrics]


def _theta(edge_of, shard_sizes, n_edges):
    out = np.zeros(n_edges)
    total = shard_sizes.sum()
    for n in range(n_edges):
        out[n] = shard_sizes[edge_of == n].sum() / total
    return out


def _u_of(alpha, params):
    acc = np.zeros(params.shape[1])
    for a, row in zip(alpha, params):
        acc += a * row
    return acc


def run(config, shards, spec, network=None, vehicles=None, edge_count=4,
        p_turn=0.0, eval_data=None, init_params_vec=None, union_data=None):
    """Execute the full hierarchical schedule.

    network/vehicles describe mobility; passing network=None selects the
    static degenerate mode where every vehicle stays attached to edge 0
    (used for the single-edge equivalence checks). Returns metrics, the
    final fleet state, per-epoch cloud/vehicle-average consistency, and
    the virtual trace when config.record_virtual is set.
    """
    M = len(shards)
    if M < 1:
        raise ValueError("need at least one shard")
    if network is not None:
        if vehicles is None or len(vehicles) != M:
            raise ValueError("mobility mode needs one VehicleState per shard")
        edge_count = network.edge_count
    P = param_length(spec)
    sizes = np.array([s.size for s in shards], dtype=np.float64)
    alpha = sizes / sizes.sum()
    if init_params_vec is None:
        w0 = init_params(spec, config.seed)  # zeros for the convex families
    else:
        w0 = np.asarray(init_params_vec, float).copy()
    if w0.shape != (P,):
        raise ValueError("init params have wrong length")

    W = np.tile(w0, (M, 1))
    edge_params = np.tile(w0, (edge_count, 1))
    cloud = w0.copy()
    sampler = BatchSampler(sizes.astype(int), config.batch_size, config.seed,
                           full_batch=config.full_batch)
    turn_rng = rng.stream(config.seed, rng.MOBILITY_TURNS) if p_turn > 0 else None

    K, tau_l, tau_e = config.cloud_epochs, config.tau_l, config.tau_e
    T = config.total_iterations
    rounds = K * tau_e

    if network is not None:
        snap = mobility.associate(network, vehicles, time=0.0)
        edge_of = snap.edge_of.copy()
    else:
        edge_of = np.zeros(M, dtype=np.int64)
    assoc_hist = np.empty((rounds + 1, M), dtype=np.int64)
    assoc_hist[0] = edge_of

    union = union_data if union_data is not None else union_of_shards(shards)
    record = config.record_virtual
    if record:
        uX, uy = union.features, union.labels
        v = w0.copy()
        trace = VirtualTrace(
            eta=config.eta, tau_l=tau_l, tau_e=tau_e, cloud_epochs=K,
            alpha=alpha.copy(), shard_sizes=sizes.copy(),
            vtilde=np.zeros((T + 1, P)),
            gap_u_vtilde=np.zeros(T + 1),
            gap_u_v=np.zeros(T + 1),
            s_vehicle=np.zeros(T + 1),
            s_edge=np.zeros(T + 1),
            vehicle_gap=np.zeros((M, T + 1)),
            edge_gap=np.full((edge_count, T + 1), np.nan),
            u_cloud=np.zeros((K + 1, P)),
            association_history=assoc_hist,
        )
        trace.vtilde[0] = w0
        trace.edge_gap[:, 0] = 0.0
        trace.u_cloud[0] = w0
    else:
        trace = None

    def record_pre(tau, vtilde_now):
        u_pre = _u_of(alpha, W)
        trace.vtilde[tau] = vtilde_now
        trace.gap_u_vtilde[tau] = np.linalg.norm(u_pre - vtilde_now)
        for m in range(M):
            trace.vehicle_gap[m, tau] = np.linalg.norm(W[m] - vtilde_now)
        for n in range(edge_count):
            members = np.flatnonzero(edge_of == n)
            if members.size:
                u_n = _u_of(edge_weights(members, sizes), W[members])
                trace.edge_gap[n, tau] = np.linalg.norm(u_n - vtilde_now)
        return u_pre

    def record_post(tau, v_now):
        u_post = _u_of(alpha, W)
        trace.gap_u_v[tau] = np.linalg.norm(u_post - v_now)
        s1 = 0.0
        for m in range(M):
            s1 += alpha[m] * np.linalg.norm(W[m] - v_now)
        trace.s_vehicle[tau] = s1
        th = _theta(edge_of, sizes, edge_count)
        s2 = 0.0
        for n in range(edge_count):
            members = np.flatnonzero(edge_of == n)
            if members.size:
                u_n = _u_of(edge_weights(members, sizes), W[members])
                s2 += th[n] * np.linalg.norm(u_n - v_now)
        trace.s_edge[tau] = s2
        return u_post

    metrics = []
    cloud_consistency = []
    tau = 0
    for j in range(1, rounds + 1):
        for s in range(1, tau_l + 1):
            tau += 1
            for m in range(M):
                idx = sampler.next_batch(m)
                W[m] = local_update(spec, shards[m], W[m], idx, config.eta,
                                    vehicle=m, iteration=tau)
            if record:
                vtilde = v - config.eta * gradient_xy(spec, v, uX, uy)
                if s < tau_l:
                    record_pre(tau, vtilde)
                    v = vtilde
                    record_post(tau, v)
        # round boundary: move, re-associate, aggregate (in that order)
        if network is not None:
            vehicles = mobility.advance(network, vehicles, dt=1.0,
                                        p_turn=p_turn, turn_rng=turn_rng)
            snap = mobility.associate(network, vehicles, time=float(j))
            edge_of = snap.edge_of.copy()
        assoc_hist[j] = edge_of
        if record:
            u_pre = record_pre(tau, vtilde)
        elif j % tau_e == 0:
            u_pre = _u_of(alpha, W)

        for n in range(edge_count):
            members = np.flatnonzero(edge_of == n)
            if members.size:
                edge_params[n] = edge_aggregate(list(members), W, sizes)
            # empty edge keeps its previous model and gets theta = 0 later
        for m in range(M):
            W[m] = edge_params[edge_of[m]]

        is_cloud = (j % tau_e == 0)
        if is_cloud:
            th = _theta(edge_of, sizes, edge_count)
            cloud = cloud_aggregate(edge_params, th)
            edge_params[:] = cloud
            W[:] = cloud
            k = j // tau_e
            cloud_consistency.append((k, float(np.max(np.abs(cloud - u_pre)))))

        if record:
            if tau % (tau_l * tau_e) == 0:
                u_post = record_post(tau, _u_of(alpha, W))
                v = u_post.copy()  # exact synchronization v <- u
                trace.gap_u_v[tau] = 0.0
                trace.u_cloud[tau // (tau_l * tau_e)] = u_post
            else:
                v = vtilde
                record_post(tau, v)

        u_metric = _u_of(alpha, W)
        train_loss = loss(spec, u_metric, union)
        test_acc = accuracy(spec, u_metric, eval_data) if eval_data is not None else float("nan")
        gap = trace.gap_u_vtilde[tau] if record else float("nan")
        metrics.append(MetricsRow(
            cloud_epoch=(j + tau_e - 1) // tau_e, edge_round=j, iteration=tau,
            train_loss=train_loss, test_accuracy=test_acc, u_vtilde_gap=float(gap),
            membership_counts=tuple(int(c) for c in np.bincount(edge_of, minlength=edge_count))))

    final = FleetState(tau=tau, vehicle_params=W.copy(),
                       edge_params=edge_params.copy(), cloud_params=cloud.copy())
    return RunResult(metrics=metrics, final_state=final, trace=trace,
                     cloud_consistency=cloud_consistency)


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_checkpoint(path, state, cfg_hash):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        digest = bytes.fromhex(cfg_hash)
        f.write(struct.pack("<B", len(digest)))
        f.write(digest)
        M, N = state.vehicle_params.shape[0], state.edge_params.shape[0]
        f.write(struct.pack("<QQQ", state.tau, M, N))
        write_param_vector(f, state.cloud_params)
        for row in state.edge_params:
            write_param_vector(f, row)
        for row in state.vehicle_params:
            write_param_vector(f, row)


def read_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise IOError("not a checkpoint file")
        (hlen,) = struct.unpack("<B", f.read(1))
        cfg_hash = f.read(hlen).hex()
        tau, M, N = struct.unpack("<QQQ", f.read(24))
        cloud = read_param_vector(f)
        edges = np.stack([read_param_vector(f) for _ in range(N)])
        vparams = np.stack([read_param_vector(f) for _ in range(M)])
        return FleetState(tau=tau, vehicle_params=vparams,
                          edge_params=edges, cloud_params=cloud), cfg_hash
