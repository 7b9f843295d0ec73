"""Stochastic tabular learners for the successor matrix and value functions.

Two parameterizations appear throughout:

* the plain matrix M itself (row updates, operator steps), and
* the density model m with M = Id + m @ diag(rho), whose sampled updates
  touch only a couple of entries per observed transition.

Forward updates bring M toward Id + gamma*P M (prepend a transition to known
paths); backward updates bring it toward Id + gamma*M P (append one). The
module also provides mixed steps, multi-step returns, relative TD for the
gamma -> 1 regime, classic TD(0)/TD(lambda) on values, a linear
parameterization, and a harness checking that value TD coincides with
``M_hat @ R`` when both run on one shared stream.

Learner state is a value passed in and returned; nothing is mutated, so
independent trials can run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .mrp import FiniteMrp, StateDistribution, TransitionSample, sample_transition

__all__ = [
    "LearnerConfig",
    "LinearMModel",
    "CouplingReport",
    "forward_td_row",
    "forward_td_sampled",
    "backward_td_sampled",
    "backward_td_full",
    "mixed_td_step",
    "multistep_td_sampled",
    "relative_td_v",
    "relative_successor_exact",
    "td0_v",
    "td_lambda_v",
    "linear_td_step",
    "forward_operator_apply",
    "backward_operator_apply",
    "coupled_td_run",
    "sup_opnorm",
    "save_checkpoint",
    "load_checkpoint",
]

SCHEDULES = ("constant", "one_over_t", "c_over_c_plus_t")


@dataclass(frozen=True)
class LearnerConfig:
    """Shared knobs for the tabular learners.

    ``schedule`` picks the step size at step t: a constant ``learning_rate``,
    1/(t+1), or c/(c+t). ``discount`` may be 1.0 only for the relative-TD
    operations. ``reference_distribution`` is the reference-state
    distribution for relative TD.
    """

    learning_rate: float = 0.1
    schedule: str = "constant"
    c: float = 100.0
    discount: float = 0.9
    horizon: int = 1
    lam: float = 0.0
    reference_distribution: StateDistribution | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 <= self.discount <= 1.0):
            raise ValueError("discount must lie in [0, 1]")

    def rate(self, step: int = 0) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "one_over_t":
            return 1.0 / (step + 1.0)
        return self.c / (self.c + step)


def _bootstrap_row(M: np.ndarray, t: TransitionSample, gamma: float) -> np.ndarray:
    """gamma * M[s', :] with the terminal convention (zero bootstrap)."""
    if t.terminal:
        return np.zeros(M.shape[1])
    return gamma * M[t.to_state]


def forward_td_row(M: np.ndarray, t: TransitionSample, cfg: LearnerConfig, step: int = 0) -> np.ndarray:
    """Full-row TD update: row s moves toward 1_{s} + gamma * row s'.

    delta_{s s2} = 1_{s = s2} + gamma*M_{s' s2} - M_{s s2} for every s2.
    """
    eta = cfg.rate(step)
    out = M.copy()
    delta = _bootstrap_row(M, t, cfg.discount) - M[t.from_state]
    delta[t.from_state] += 1.0
    out[t.from_state] += eta * delta
    return out


def forward_td_sampled(
    m: np.ndarray,
    t: TransitionSample,
    target: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Two-entry sampled update of the density model (M = Id + m diag(rho)).

    Entry (s, s') gains eta*gamma; entry (s, target) absorbs the bootstrap
    gap gamma*m(s', target) - m(s, target). The target state is an
    independent draw from rho supplied by the caller.
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    out = m.copy()
    s = t.from_state
    gap = -m[s, target]
    if not t.terminal:
        out[s, t.to_state] += eta * gamma
        gap = gap + gamma * m[t.to_state, target]
    out[s, target] += eta * gap
    return out


def backward_td_sampled(
    m: np.ndarray,
    t: TransitionSample,
    source: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Three-entry sampled backward update of the density model.

    Entry (s, s') gains eta*gamma; row ``source`` trades mass from column s
    to column s' with weight m(source, s), the sampled form of appending the
    observed transition to known paths ending at s.
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    out = m.copy()
    s, s2 = t.from_state, t.to_state
    if t.terminal:
        out[source, s] -= eta * m[source, s]
        return out
    out[s, s2] += eta * gamma
    out[source, s2] += eta * gamma * m[source, s]
    out[source, s] -= eta * m[source, s]
    return out


def backward_td_full(M: np.ndarray, t: TransitionSample, cfg: LearnerConfig, step: int = 0) -> np.ndarray:
    """Full-column mirror of ``forward_td_row``: column s' moves toward
    1_{s'} + gamma * column s.

    When the sampling distribution is uniform and stationary (doubly
    stochastic P, the regime of the continuous-time comparisons), its
    expectation is (1/S)(Id + gamma*M P - M), vanishing exactly at the true
    successor matrix. The general-rho backward learner is
    ``backward_td_sampled`` on the density model.
    """
    eta = cfg.rate(step)
    out = M.copy()
    if t.terminal:
        return out
    s, s2 = t.from_state, t.to_state
    delta = cfg.discount * M[:, s] - M[:, s2]
    delta[s2] += 1.0
    out[:, s2] += eta * delta
    return out


def mixed_td_step(
    M: np.ndarray,
    t: TransitionSample,
    cfg: LearnerConfig,
    mix: float,
    step: int = 0,
) -> np.ndarray:
    """Convex mix of the forward row update and the backward column update.

    mix = 1 reproduces ``forward_td_row`` exactly, mix = 0 the backward
    full-matrix update; both deltas are computed from the incoming M.
    """
    if not (0.0 <= mix <= 1.0):
        raise ValueError("mix must lie in [0, 1]")
    fwd = forward_td_row(M, t, cfg, step) - M
    bwd = backward_td_full(M, t, cfg, step) - M
    return M + mix * fwd + (1.0 - mix) * bwd


def multistep_td_sampled(
    m: np.ndarray,
    states: list[int],
    target: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Horizon-h sampled update of the density model from h consecutive
    transitions s_0 -> s_1 -> ... -> s_h.

    Row s_0 gains gamma^k at each visited s_k, plus the h-step bootstrap gap
    gamma^h m(s_h, target) - m(s_0, target) at an independently drawn target.
    Horizon 1 reduces to ``forward_td_sampled``.
    """
    h = cfg.horizon
    if len(states) != h + 1:
        raise ValueError(f"need {h + 1} consecutive states for horizon {h}")
    eta = cfg.rate(step)
    gamma = cfg.discount
    out = m.copy()
    s0 = states[0]
    for k in range(1, h + 1):
        out[s0, states[k]] += eta * gamma**k
    gap = gamma**h * m[states[h], target] - m[s0, target]
    out[s0, target] += eta * gap
    return out


def relative_td_v(
    v: np.ndarray,
    t: TransitionSample,
    s_rel: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Value TD with the discounted value at a reference state subtracted.

    delta = r + gamma*V(s') - V(s) - gamma*V(s_rel). Well-defined at
    discount 1 on ergodic chains, where plain TD drifts.
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    out = v.copy()
    boot = 0.0 if t.terminal else gamma * v[t.to_state]
    out[t.from_state] += eta * (t.reward + boot - v[t.from_state] - gamma * v[s_rel])
    return out


def relative_successor_exact(
    mrp: FiniteMrp,
    rho_rel: StateDistribution,
    gamma: float | None = None,
) -> np.ndarray:
    """(Id - gamma*P + gamma*1 rho_rel^T)^{-1}, the relative successor matrix.

    ``gamma`` may be 1.0 (ergodic P), overriding the process discount; with
    gamma = 1 and rho_rel the stationary distribution this is the classical
    fundamental matrix. Raises LinAlgError if the shifted operator is
    singular.
    """
    g = mrp.discount if gamma is None else gamma
    S = mrp.num_states
    A = np.eye(S) - g * mrp.transition + g * np.outer(np.ones(S), rho_rel.weights)
    return np.linalg.solve(A, np.eye(S))


def td0_v(v: np.ndarray, t: TransitionSample, cfg: LearnerConfig, step: int = 0) -> np.ndarray:
    """Classic TD(0) on the value vector."""
    eta = cfg.rate(step)
    boot = 0.0 if t.terminal else cfg.discount * v[t.to_state]
    out = v.copy()
    out[t.from_state] += eta * (t.reward + boot - v[t.from_state])
    return out


def td_lambda_v(
    v: np.ndarray,
    trace: np.ndarray,
    t: TransitionSample,
    cfg: LearnerConfig,
    step: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """One TD(lambda) step on consecutive (trajectory-mode) samples.

    The eligibility trace decays by gamma*lambda and is bumped at the current
    state; every state then absorbs the scaled TD error.
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    new_trace = gamma * cfg.lam * trace
    new_trace[t.from_state] += 1.0
    boot = 0.0 if t.terminal else gamma * v[t.to_state]
    delta = t.reward + boot - v[t.from_state]
    return v + eta * delta * new_trace, new_trace


@dataclass(frozen=True, eq=False)
class LinearMModel:
    """Linear-in-features model of the successor density:
    m_tilde(s, s2) = sum_i theta_i * features[i, s, s2].
    """

    features: np.ndarray  # (k, S, S)
    params: np.ndarray  # (k,)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        theta = np.asarray(self.params, dtype=float)
        if feats.ndim != 3 or feats.shape[1] != feats.shape[2]:
            raise ValueError("features must have shape (k, S, S)")
        if theta.shape != (feats.shape[0],):
            raise ValueError("params must have one entry per feature")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "params", theta)

    def matrix(self) -> np.ndarray:
        return np.einsum("k,kij->ij", self.params, self.features)


def linear_td_step(
    model: LinearMModel,
    t: TransitionSample,
    target: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> LinearMModel:
    """Sampled TD step on the linear model (density without the Id split):

    theta_i += eta * (phi_i(s, s) + phi_i(s, target) * (gamma*m(s', target)
    - m(s, target))).
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    m = model.matrix()
    s = t.from_state
    boot = 0.0 if t.terminal else gamma * m[t.to_state, target]
    gap = boot - m[s, target]
    grad = model.features[:, s, s] + model.features[:, s, target] * gap
    return replace(model, params=model.params + eta * grad)


def forward_operator_apply(M: np.ndarray, mrp: FiniteMrp) -> np.ndarray:
    """Exact forward operator Id + gamma*P M (a gamma-contraction in sup norm)."""
    return np.eye(mrp.num_states) + mrp.discount * mrp.transition @ M


def backward_operator_apply(M: np.ndarray, mrp: FiniteMrp) -> np.ndarray:
    """Exact backward operator Id + gamma*M P (a gamma-contraction in sup norm)."""
    return np.eye(mrp.num_states) + mrp.discount * M @ mrp.transition


def sup_opnorm(A: np.ndarray) -> float:
    """Operator norm of A acting on sup-normed functions: max abs row sum."""
    return float(np.abs(A).sum(axis=1).max())


def _dot_ascending(row: np.ndarray, rewards: np.ndarray) -> float:
    """Left-to-right dot product in ascending column order.

    The float summation order is pinned so the value-learning identity below
    can be checked at full precision rather than behind a loose tolerance.
    """
    acc = 0.0
    for s2 in range(row.shape[0]):
        acc += row[s2] * rewards[s2]
    return acc


@dataclass(frozen=True, eq=False)
class CouplingReport:
    """Result of running value TD and matrix TD on one shared stream."""

    steps: int
    max_deviation: float
    first_failure_step: int | None  # first step where |V - M R| exceeded tol
    tolerance: float
    deviations: np.ndarray | None = None  # per-step, when recorded


def coupled_td_run(
    mrp: FiniteMrp,
    steps: int,
    cfg: LearnerConfig,
    rng: np.random.Generator,
    rho: StateDistribution | None = None,
    tolerance: float = 1e-12,
    record: bool = False,
) -> CouplingReport:
    """Run V-TD and M-TD side by side on one transition stream and compare
    V_hat against M_hat @ R after every step.

    With deterministic rewards the two stay equal (checked here at
    ``tolerance``, with the matrix product summed in pinned ascending order);
    with reward noise the equality is expected to break, which the report
    makes visible through ``max_deviation`` and ``first_failure_step``.
    """
    S = mrp.num_states
    if rho is None:
        rho = StateDistribution(np.full(S, 1.0 / S))
    V = np.zeros(S)
    M = np.zeros((S, S))
    R = mrp.reward_mean
    max_dev = 0.0
    first_fail = None
    trail = np.zeros(steps) if record else None
    for step in range(steps):
        t = sample_transition(mrp, rho, rng)
        V = td0_v(V, t, cfg, step)
        M = forward_td_row(M, t, cfg, step)
        dev = max(abs(V[s] - _dot_ascending(M[s], R)) for s in range(S))
        if trail is not None:
            trail[step] = dev
        if dev > max_dev:
            max_dev = dev
        if first_fail is None and dev > tolerance:
            first_fail = step
    return CouplingReport(steps, max_dev, first_fail, tolerance, trail)


# ---------------------------------------------------------------------------
# Checkpoint files: {"step": t, "M": [[...]], "V": [...], "theta": [...]}
# ---------------------------------------------------------------------------

def save_checkpoint(path, step: int, M=None, V=None, theta=None) -> None:
    payload = {
        "step": int(step),
        "M": None if M is None else np.asarray(M).tolist(),
        "V": None if V is None else np.asarray(V).tolist(),
        "theta": None if theta is None else np.asarray(theta).tolist(),
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> dict:
    with open(path) as f:
        d = json.load(f)
    return {
        "step": int(d["step"]),
        "M": None if d.get("M") is None else np.array(d["M"], dtype=float),
        "V": None if d.get("V") is None else np.array(d["V"], dtype=float),
        "theta": None if d.get("theta") is None else np.array(d["theta"], dtype=float),
    }
