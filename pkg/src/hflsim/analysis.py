"""Heterogeneity constants and empirical checks of the convergence bounds.

The bounds relate the recorded virtual trajectories of a full-batch convex
run to constants estimated from the data: per-vehicle gradient divergence
delta_m, per-edge divergence Delta_n (time-varying through the association
history), the smoothness constant beta and the region Lipschitz constant
rho. Suprema are taken over a finite probe set (the recorded centralized
trajectory plus the origin and the optimum), so every constant is a
region-restricted estimate, not a global bound.
"""

import json
from dataclasses import dataclass

import numpy as np

from .models import UnsupportedModelError, gradient, loss

DEFAULT_SLACK = 1e-9


@dataclass
class DivergenceEstimates:
    """Gradient-divergence constants over a probe set.

    Bracket index j refers to the association snapshot in force at local
    iteration j*tau_l (j = 0 is the initial association).
    """
    tau_l: int
    delta_m: np.ndarray          # (M,)
    delta: float                 # sum_m alpha_m delta_m
    alpha: np.ndarray            # (M,)
    delta_n_bracket: np.ndarray  # (J+1, N); nan for empty edges
    Delta_n_bracket: np.ndarray  # (J+1, N); nan for empty edges
    Delta_bracket: np.ndarray    # (J+1,)  sum_n theta_n Delta_n
    theta_bracket: np.ndarray    # (J+1, N)
    probe_count: int

    def delta_n(self, n, tau):
        return float(self.delta_n_bracket[tau // self.tau_l, n])

    def Delta_n(self, n, tau):
        return float(self.Delta_n_bracket[tau // self.tau_l, n])

    def Delta(self, tau):
        return float(self.Delta_bracket[tau // self.tau_l])


def estimate_divergences(spec, shards, association_history, probes, tau_l=1):
    """Definition-style divergence constants, maximized over the probes.

    delta_m = max_w ||grad f_m(w) - grad F(w)||; Delta_n at bracket j uses
    the weighted edge objective over the snapshot at j. Full-batch
    gradients throughout. tau_l maps local iterations onto bracket
    indices for the per-iteration accessors.
    """
    if not spec.is_convex:
        raise UnsupportedModelError("divergence constants require a convex family")
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] == 0:
        raise ValueError("need at least one probe point")
    M = len(shards)
    sizes = np.array([s.size for s in shards], dtype=np.float64)
    alpha = sizes / sizes.sum()
    hist = np.asarray(association_history)
    J = hist.shape[0] - 1
    N = int(hist.max()) + 1 if hist.size else 1

    # per-bracket edge weight matrices: A[j, n, m] = alpha_{m,n} at bracket j
    A = np.zeros((J + 1, N, M))
    occupied = np.zeros((J + 1, N), dtype=bool)
    theta = np.zeros((J + 1, N))
    for j in range(J + 1):
        for n in range(N):
            members = hist[j] == n
            tot = sizes[members].sum()
            theta[j, n] = tot / sizes.sum()
            if tot > 0:
                A[j, n, members] = sizes[members] / tot
                occupied[j, n] = True

    delta_m = np.zeros(M)
    Delta_n = np.zeros((J + 1, N))
    for w in probes:
        G = np.stack([gradient(spec, w, s.data) for s in shards])  # (M, P)
        gF = alpha @ G
        delta_m = np.maximum(delta_m, np.linalg.norm(G - gF, axis=1))
        ge = A.reshape(-1, M) @ G  # ((J+1)*N, P)
        vals = np.linalg.norm(ge - gF, axis=1).reshape(J + 1, N)
        Delta_n = np.maximum(Delta_n, vals)
    Delta_n = np.where(occupied, Delta_n, np.nan)
    delta_n = np.where(occupied, A @ delta_m, np.nan)
    Delta = np.nansum(np.where(theta > 0, theta * Delta_n, 0.0), axis=1)
    return DivergenceEstimates(
        tau_l=tau_l,
        delta_m=delta_m, delta=float(alpha @ delta_m), alpha=alpha,
        delta_n_bracket=delta_n, Delta_n_bracket=Delta_n,
        Delta_bracket=Delta, theta_bracket=theta, probe_count=probes.shape[0])


def estimates_for_trace(spec, shards, trace, probes):
    return estimate_divergences(spec, shards, trace.association_history, probes,
                                tau_l=trace.tau_l)


def shared_input_delta_m(shards):
    """Exact delta_m for the shared-input quadratic construction.

    With a common feature matrix the gap grad f_m - grad F equals
    X'(Ybar - Y_m)/n for every w, so the constant is closed-form.
    """
    X = shards[0].data.features
    n = X.shape[0]
    C = shards[0].data.class_count
    onehots = []
    for s in shards:
        if s.data.features.shape != X.shape or not np.array_equal(s.data.features, X):
            raise ValueError("shards do not share a feature matrix")
        T = np.zeros((n, C))
        T[np.arange(n), s.data.labels] = 1.0
        onehots.append(T)
    Ybar = np.mean(onehots, axis=0)
    return np.array([np.linalg.norm(X.T @ (Ybar - Ym)) / n for Ym in onehots])


def _powi(base, n):
    """base**n by square-and-multiply on the exact binary value."""
    if n < 0:
        raise ValueError("exponent must be >= 0")
    result = 1.0
    acc = float(base)
    k = int(n)
    while k:
        if k & 1:
            result *= acc
        acc *= acc
        k >>= 1
    return result


def drift_polynomial(tau, eta, delta, beta):
    """delta/beta * ((1+eta*beta)^tau - 1) - tau*eta*delta."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return delta / beta * (_powi(1.0 + eta * beta, tau) - 1.0) - tau * eta * delta


def vehicle_drift_bound(tau0, delta_m, eta, beta):
    """Drift of one vehicle from the centralized trajectory, tau0 steps
    after the last cloud synchronization."""
    if not 0 < tau0:
        raise ValueError("tau0 must be positive")
    return delta_m / beta * (_powi(1.0 + eta * beta, tau0) - 1.0)


def edge_drift_bound(tau0, delta_n, Delta_n, eta, beta):
    """Drift of one edge's virtual average from the centralized trajectory."""
    if not 0 < tau0:
        raise ValueError("tau0 must be positive")
    return (delta_n / beta * (_powi(1.0 + eta * beta, tau0) - 1.0)
            - eta * tau0 * (delta_n - Delta_n))


def drift_bound(tau0, estimates, inputs, edge=None, vehicle=None, tau=None):
    """Dispatch to the vehicle-level or edge-level drift bound."""
    if not 0 < tau0 <= inputs.tau_l * inputs.tau_e:
        raise ValueError(f"tau0 must lie in (0, {inputs.tau_l * inputs.tau_e}]")
    if (edge is None) == (vehicle is None):
        raise ValueError("pass exactly one of edge or vehicle")
    if vehicle is not None:
        return vehicle_drift_bound(tau0, estimates.delta_m[vehicle], inputs.eta, inputs.beta)
    if tau is None:
        raise ValueError("edge bound needs the iteration tau for its snapshot")
    return edge_drift_bound(tau0, estimates.delta_n(edge, tau),
                            estimates.Delta_n(edge, tau), inputs.eta, inputs.beta)


@dataclass
class BoundInputs:
    beta: float
    rho: float
    eta: float
    tau_l: int
    tau_e: int
    cloud_epochs: int
    epsilon: float
    w_star: np.ndarray
    f_star: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.beta <= 0 or self.rho <= 0:
            raise ValueError("beta and rho must be > 0")

    @property
    def eta_feasible(self):
        return self.eta <= 1.0 / self.beta


@dataclass
class DriftBoundEntry:
    k: int                 # cloud epoch, 1-based
    value: float           # U_k
    r_term: float
    mobility_term: float
    measured: float        # ||u - vtilde|| at the epoch's cloud instant
    satisfied: bool


@dataclass
class DriftBoundReport:
    entries: list

    @property
    def total(self):
        return sum(e.value for e in self.entries)

    def csv_rows(self):
        head = ["k", "U_k", "r_term", "mobility_term", "measured_gap_u_vtilde", "satisfied"]
        rows = [head]
        for e in self.entries:
            rows.append([str(e.k), repr(e.value), repr(e.r_term), repr(e.mobility_term),
                         repr(e.measured), str(e.satisfied).lower()])
        return rows


def central_drift_bound(k, estimates, inputs):
    """Central-cloud drift bound for the window starting at k*tau_l*tau_e.

    k is 0-based here: the returned value bounds ||u - vtilde|| at
    iteration (k+1)*tau_l*tau_e, and consumes the bracket divergences
    Delta^[k*tau_e + j] for j = 1..tau_e-1.
    """
    tau_l, tau_e, eta = inputs.tau_l, inputs.tau_e, inputs.eta
    delta = estimates.delta
    r_term = drift_polynomial(tau_l * tau_e, eta, delta, inputs.beta)
    js = np.arange(1, tau_e)
    idx = k * tau_e + js
    if idx.size and idx.max() >= estimates.Delta_bracket.shape[0]:
        raise ValueError(f"missing Delta bracket entries for window {k}")
    mix = float(np.sum(js * estimates.Delta_bracket[idx])) if idx.size else 0.0
    mobility_term = -eta * tau_l * (0.5 * tau_e * (tau_e - 1) * delta - mix)
    return r_term + mobility_term, r_term, mobility_term


def build_drift_report(trace, estimates, inputs, slack=DEFAULT_SLACK):
    """Per-cloud-epoch bound vs the measured central-cloud gap."""
    entries = []
    span = inputs.tau_l * inputs.tau_e
    for k in range(1, inputs.cloud_epochs + 1):
        value, r_term, mob = central_drift_bound(k - 1, estimates, inputs)
        measured = float(trace.gap_u_vtilde[k * span])
        entries.append(DriftBoundEntry(
            k=k, value=value, r_term=r_term, mobility_term=mob,
            measured=measured, satisfied=measured <= value + slack))
    return DriftBoundReport(entries=entries)


@dataclass
class Violation:
    check: str
    where: dict
    measured: float
    bound: float

    def __str__(self):
        loc = ", ".join(f"{k}={v}" for k, v in self.where.items())
        return f"{self.check} violated at {loc}: {self.measured} > {self.bound}"


def check_vehicle_drift(trace, estimates, inputs, slack=DEFAULT_SLACK):
    """Vehicle drift vs its bound, for every vehicle and iteration."""
    out = []
    span = inputs.tau_l * inputs.tau_e
    T = trace.total_iterations
    for tau in range(1, T + 1):
        tau0 = tau - ((tau - 1) // span) * span
        for m in range(trace.vehicle_gap.shape[0]):
            bound = vehicle_drift_bound(tau0, estimates.delta_m[m], inputs.eta, inputs.beta)
            measured = float(trace.vehicle_gap[m, tau])
            if measured > bound + slack:
                out.append(Violation("vehicle_drift", {"m": m, "tau": tau, "tau0": tau0},
                                     measured, bound))
    return out


def check_edge_drift(trace, estimates, inputs, slack=DEFAULT_SLACK):
    """Edge drift vs its bound; empty edges are skipped."""
    out = []
    span = inputs.tau_l * inputs.tau_e
    T = trace.total_iterations
    N = trace.edge_gap.shape[0]
    for tau in range(1, T + 1):
        tau0 = tau - ((tau - 1) // span) * span
        for n in range(N):
            measured = trace.edge_gap[n, tau]
            if np.isnan(measured):
                continue
            dn = estimates.delta_n(n, tau)
            Dn = estimates.Delta_n(n, tau)
            if np.isnan(dn):
                continue
            bound = edge_drift_bound(tau0, dn, Dn, inputs.eta, inputs.beta)
            if measured > bound + slack:
                out.append(Violation("edge_drift", {"n": n, "tau": tau, "tau0": tau0},
                                     float(measured), bound))
    return out


def check_recursion(trace, inputs, slack=DEFAULT_SLACK):
    """Three-case recursion on ||u - vtilde||, one inequality per iteration."""
    out = []
    span = inputs.tau_l * inputs.tau_e
    eb = inputs.eta * inputs.beta
    T = trace.total_iterations
    for tau in range(1, T + 1):
        prev = tau - 1
        if prev % span == 0:
            rhs = 0.0
            case = "cloud"
        elif prev % inputs.tau_l == 0:
            rhs = trace.gap_u_v[prev] + eb * trace.s_edge[prev]
            case = "edge"
        else:
            rhs = trace.gap_u_v[prev] + eb * trace.s_vehicle[prev]
            case = "local"
        measured = float(trace.gap_u_vtilde[tau])
        if measured > rhs + slack:
            out.append(Violation(f"recursion[{case}]", {"tau": tau}, measured, rhs))
    return out


def check_central_drift(trace, estimates, inputs, slack=DEFAULT_SLACK):
    out = []
    report = build_drift_report(trace, estimates, inputs, slack)
    for e in report.entries:
        if not e.satisfied:
            out.append(Violation("central_drift", {"k": e.k}, e.measured, e.value))
    return out, report


@dataclass
class GapBoundReport:
    applicable: bool
    bound: float          # nan when not applicable
    measured_gap: float
    phi: float
    epsilon: float
    conditions: dict      # name -> bool (over all epochs)
    per_epoch: list       # dicts with the per-k condition values
    degenerate: bool = False
    note: str = ""

    def to_json_dict(self, inputs, estimates):
        return {
            "beta": inputs.beta, "rho": inputs.rho, "delta": estimates.delta,
            "epsilon": self.epsilon, "phi": self.phi,
            "bound": None if not self.applicable else self.bound,
            "measured_final_gap": self.measured_gap,
            "applicable": self.applicable,
            "conditions": [{"name": k, "holds": v} for k, v in self.conditions.items()],
            "note": self.note,
        }


def check_gap_bound(spec, union, trace, inputs, drift_report, slack=DEFAULT_SLACK):
    """Evaluate the convergence-gap bound and its applicability gates.

    Gates: step size at most 1/beta, a positive per-epoch margin, two
    loss-level floors, and the definitional premise that every supplied
    U_k actually upper-bounds the measured central-cloud gap (with
    small-eta iid-like runs the drift formula can go negative, in which
    case no valid U_k exists and the bound is inapplicable). The fourth
    gate is evaluated twice: on the raw loss, F(w) >= epsilon, and in a
    strict centered mode, F(w) - F* >= epsilon. Both are reported;
    applicability follows the raw form.
    """
    span = inputs.tau_l * inputs.tau_e
    K = inputs.cloud_epochs
    T = K * span
    eps = inputs.epsilon

    dists = [float(np.linalg.norm(trace.vtilde[(k - 1) * span] - inputs.w_star))
             for k in range(1, K + 1)]
    if min(dists) == 0.0:
        return GapBoundReport(
            applicable=False, bound=float("nan"),
            measured_gap=float(loss(spec, trace.u_cloud[K], union) - inputs.f_star),
            phi=float("inf"), epsilon=eps, conditions={}, per_epoch=[],
            degenerate=True, note="bound degenerate, training already optimal")
    phi = min((1.0 - inputs.beta * inputs.eta / 2.0) / d ** 2 for d in dists)

    cond1 = inputs.eta_feasible
    per_epoch = []
    cond2 = cond3 = cond4 = cond4_strict = premise = True
    for k in range(1, K + 1):
        entry = drift_report.entries[k - 1]
        uk = entry.value
        c2 = inputs.eta * phi - inputs.rho * uk / (span * eps ** 2) > 0.0
        cp = entry.measured <= uk + slack
        f_vt = loss(spec, trace.vtilde[k * span], union)
        f_w = loss(spec, trace.u_cloud[k], union)
        c3 = f_vt - inputs.f_star >= eps
        c4 = f_w >= eps
        c4s = f_w - inputs.f_star >= eps
        per_epoch.append({"k": k, "U_k": uk, "cond2": c2, "cond3": c3,
                          "cond4": c4, "cond4_strict": c4s, "uk_premise": cp,
                          "F_vtilde": f_vt, "F_w": f_w})
        cond2 &= c2
        cond3 &= c3
        cond4 &= c4
        cond4_strict &= c4s
        premise &= cp

    conditions = {"eta_le_inv_beta": cond1, "positive_margin": cond2,
                  "vtilde_gap_ge_eps": cond3, "w_loss_ge_eps": cond4,
                  "w_gap_ge_eps_strict": cond4_strict,
                  "uk_upper_bounds_gap": premise}
    applicable = cond1 and cond2 and cond3 and cond4 and premise
    denom = T * inputs.eta * phi - inputs.rho * drift_report.total / eps ** 2
    bound = 1.0 / denom if (applicable and denom > 0.0) else float("nan")
    if applicable and denom <= 0.0:
        applicable = False
    measured = float(loss(spec, trace.u_cloud[K], union) - inputs.f_star)
    return GapBoundReport(applicable=applicable, bound=bound, measured_gap=measured,
                          phi=phi, epsilon=eps, conditions=conditions,
                          per_epoch=per_epoch)


def choose_epsilon(spec, union, trace, f_star, tau_l, tau_e, cloud_epochs):
    """Largest epsilon for which the two loss-level gates can hold.

    Returns min over epochs of min(F(vtilde) - F*, F(w)); nonpositive
    means no feasible epsilon exists for this run.
    """
    span = tau_l * tau_e
    vals = []
    for k in range(1, cloud_epochs + 1):
        vals.append(loss(spec, trace.vtilde[k * span], union) - f_star)
        vals.append(loss(spec, trace.u_cloud[k], union))
    return float(min(vals))


@dataclass
class MixingReport:
    brackets: np.ndarray        # j values
    Delta: np.ndarray           # Delta^[j]
    first_quarter_mean: float
    last_quarter_mean: float


def mobility_mixing_report(estimates):
    """Trajectory of the edge divergence Delta^[j] and quarter means."""
    D = estimates.Delta_bracket
    J = D.shape[0]
    q = max(1, J // 4)
    return MixingReport(
        brackets=np.arange(J), Delta=D.copy(),
        first_quarter_mean=float(D[:q].mean()),
        last_quarter_mean=float(D[J - q:].mean()))


def convex_combination_residuals(estimates):
    """Recompute delta and Delta^[j] from their definitions; max residual."""
    r1 = abs(float(estimates.alpha @ estimates.delta_m) - estimates.delta)
    th = estimates.theta_bracket
    Dn = np.where(np.isnan(estimates.Delta_n_bracket), 0.0, estimates.Delta_n_bracket)
    r2 = float(np.max(np.abs((th * Dn).sum(axis=1) - estimates.Delta_bracket)))
    return max(r1, r2)


def summary_json(inputs, estimates, gap_report):
    return json.dumps(gap_report.to_json_dict(inputs, estimates), indent=2, sort_keys=True)
