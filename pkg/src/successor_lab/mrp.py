"""Finite Markov reward/decision processes and exact successor-matrix oracles.

The central object is the successor matrix M = (Id - gamma*P)^{-1} of a finite
Markov reward process: entry (s, s') is the expected discounted number of
visits to s' starting from s, and V = M @ R maps any reward vector to its
value function. This module holds the ground-truth process types, dense
oracles for M and V, the norms used to compare estimates, samplers, and the
time-reversed process.

All types are immutable values after construction and all operations are pure
functions, so they are safe to share between threads. Samplers take an
explicit ``numpy.random.Generator`` so parallel trials can use disjoint
streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FiniteMrp",
    "FiniteMdp",
    "StateDistribution",
    "TransitionSample",
    "EnumerationBudgetError",
    "NotStationaryError",
    "StationaryDistributionError",
    "ZeroMeasureStateError",
    "uniform_distribution",
    "laplacian",
    "successor_exact",
    "successor_partial_sum",
    "path_sum_oracle",
    "value_exact",
    "rho_norm",
    "tv_norm",
    "stationary_distribution",
    "backward_process",
    "sample_transition",
    "mdp_to_mrp",
    "mdp_to_state_action_mrp",
    "mrp_to_dict",
    "mrp_from_dict",
    "mdp_to_dict",
    "mdp_from_dict",
    "save_process",
    "load_process",
]


class EnumerationBudgetError(RuntimeError):
    """Raised when explicit path enumeration would exceed its budget."""


class NotStationaryError(ValueError):
    """Raised when a distribution claimed stationary fails rho^T P = rho^T."""


class StationaryDistributionError(RuntimeError):
    """Raised when power iteration fails to converge (reducible/periodic chain)."""


class ZeroMeasureStateError(ValueError):
    """Raised when an operation requires a strictly positive state distribution."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FiniteMrp:
    """A finite Markov reward process (P, R, gamma) on states {0..S-1}.

    ``transition`` may be row-substochastic: a row-mass deficit models
    termination (the sampler emits a terminal marker and learners treat the
    bootstrap term as zero for that step). ``discount`` must be < 1 strictly;
    the gamma -> 1 regime is handled by the relative-TD operations, which take
    gamma from their own config.
    """

    num_states: int
    transition: np.ndarray
    reward_mean: np.ndarray
    reward_noise_std: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        if P.shape != (self.num_states, self.num_states):
            raise ValueError(f"transition must be {self.num_states}x{self.num_states}, got {P.shape}")
        if np.any(P < -1e-15):
            raise ValueError("transition entries must be nonnegative")
        row_sums = P.sum(axis=1)
        if np.any(row_sums > 1.0 + 1e-9):
            raise ValueError(f"row sums must be <= 1, got max {row_sums.max()}")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        R = np.asarray(self.reward_mean, dtype=float)
        sig = np.asarray(self.reward_noise_std, dtype=float)
        if R.shape != (self.num_states,) or sig.shape != (self.num_states,):
            raise ValueError("reward_mean and reward_noise_std must be length-S vectors")
        if np.any(sig < 0):
            raise ValueError("reward_noise_std must be nonnegative")
        object.__setattr__(self, "transition", _readonly(np.clip(P, 0.0, None)))
        object.__setattr__(self, "reward_mean", _readonly(R))
        object.__setattr__(self, "reward_noise_std", _readonly(sig))

    @property
    def is_stochastic(self) -> bool:
        return bool(np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-10))


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """A finite Markov decision process with S x A x S transition array."""

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward_mean: np.ndarray
    discount: float

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        P = np.asarray(self.transition, dtype=float)
        if P.shape != (S, A, S):
            raise ValueError(f"transition must be {S}x{A}x{S}, got {P.shape}")
        if np.any(P < -1e-15):
            raise ValueError("transition entries must be nonnegative")
        if not np.allclose(P.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("P(s, a, .) must sum to 1 for every (s, a)")
        R = np.asarray(self.reward_mean, dtype=float)
        if R.shape != (S, A):
            raise ValueError(f"reward_mean must be {S}x{A}, got {R.shape}")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        object.__setattr__(self, "transition", _readonly(np.clip(P, 0.0, None)))
        object.__setattr__(self, "reward_mean", _readonly(R))


@dataclass(frozen=True, eq=False)
class StateDistribution:
    """A probability vector over states, with a strict-positivity flag.

    Several learners require every state to carry positive mass; the flag is
    computed at construction so callers can check it cheaply.
    """

    weights: np.ndarray
    is_positive: bool = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, sum is {w.sum()!r}")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "is_positive", bool(np.all(w > 0)))

    @property
    def num_states(self) -> int:
        return self.weights.shape[0]

    def diag(self) -> np.ndarray:
        return np.diag(self.weights)


def uniform_distribution(num_states: int) -> StateDistribution:
    return StateDistribution(np.full(num_states, 1.0 / num_states))


@dataclass(frozen=True)
class TransitionSample:
    """One observation (s, s', r). ``terminal`` marks a termination step.

    When the sampled row of P is substochastic and the mass deficit fires,
    there is no successor state: ``to_state`` is set to ``from_state`` and
    ``terminal`` is True; learners must use a zero bootstrap for that step.
    """

    from_state: int
    to_state: int
    reward: float
    terminal: bool = False


def laplacian(mrp: FiniteMrp) -> np.ndarray:
    """Id - gamma*P, the operator whose inverse is the successor matrix."""
    return np.eye(mrp.num_states) - mrp.discount * mrp.transition


def successor_exact(mrp: FiniteMrp) -> np.ndarray:
    """Dense successor matrix M = (Id - gamma*P)^{-1} by direct solve.

    For gamma < 1 and (sub)stochastic P the matrix is always invertible; a
    LinAlgError here indicates corrupted input and is let through as-is.
    """
    S = mrp.num_states
    return np.linalg.solve(laplacian(mrp), np.eye(S))


def successor_partial_sum(mrp: FiniteMrp, horizon: int) -> np.ndarray:
    """Truncated series sum_{k<=horizon} gamma^k P^k.

    Entrywise nondecreasing in ``horizon`` and converging to
    ``successor_exact`` as the horizon grows.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    S = mrp.num_states
    term = np.eye(S)
    total = np.eye(S)
    gP = mrp.discount * mrp.transition
    for _ in range(horizon):
        term = gP @ term
        total = total + term
    return total


def path_sum_oracle(mrp: FiniteMrp, from_state: int, to_state: int, max_len: int) -> float:
    """Sum over explicit paths p from ``from_state`` to ``to_state`` with
    |p| <= max_len of gamma^{|p|} * P(p), by depth-first enumeration.

    This is a brute-force oracle: it must stay independent of the matrix
    route, so it walks the transition graph path by path. Guarded by
    branching^max_len <= 1e7 enumerated paths.
    """
    P = mrp.transition
    support = [np.nonzero(P[s] > 0)[0] for s in range(mrp.num_states)]
    branching = max((len(s) for s in support), default=0)
    if branching ** max(max_len, 1) > 1e7:
        raise EnumerationBudgetError(
            f"branching {branching} ** max_len {max_len} exceeds the 1e7 path budget"
        )
    gamma = mrp.discount
    total = 1.0 if from_state == to_state else 0.0  # the empty path

    def walk(state: int, length: int, weight: float):
        nonlocal total
        if length == max_len:
            return
        for nxt in support[state]:
            w = weight * gamma * P[state, nxt]
            if nxt == to_state:
                total += w
            walk(nxt, length + 1, w)

    walk(from_state, 0, 1.0)
    return total


def value_exact(mrp: FiniteMrp) -> np.ndarray:
    """Exact value function V = M R; satisfies V = R + gamma*P V."""
    return np.linalg.solve(laplacian(mrp), mrp.reward_mean)


def rho_norm(a: np.ndarray, b: np.ndarray, rho: StateDistribution) -> float:
    """L2(rho x rho) distance between two successor matrices, measured on
    their densities with respect to rho: m_i(s, s') = (M_i)_{ss'} / rho_{s'}.
    """
    if not rho.is_positive:
        raise ZeroMeasureStateError("rho must be strictly positive for the density norm")
    w = rho.weights
    d = (np.asarray(a) - np.asarray(b)) / w[None, :]
    return float(np.sqrt(np.einsum("i,j,ij->", w, w, d * d)))


def tv_norm(a: np.ndarray, b: np.ndarray, rho: StateDistribution) -> float:
    """rho-averaged total variation distance between the rows of a and b."""
    row_tv = 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=1)
    return float(rho.weights @ row_tv)


def stationary_distribution(
    mrp: FiniteMrp,
    tol: float = 1e-10,
    max_iter: int = 1_000_000,
) -> StateDistribution:
    """Stationary distribution of P by power iteration.

    Requires P stochastic and irreducible. If plain iteration stalls
    (periodic chain), a damping factor of 0.5 is applied automatically, which
    leaves the stationary distribution unchanged. Raises
    StationaryDistributionError after the iteration cap.
    """
    P = mrp.transition
    if not mrp.is_stochastic:
        raise NotStationaryError("stationary distribution requires a stochastic P")
    S = mrp.num_states
    rho = np.full(S, 1.0 / S)
    matrix = P
    damped = False
    checkpoint_residual = np.inf
    for it in range(max_iter):
        residual = float(np.abs(rho @ P - rho).sum())
        if residual < tol:
            return StateDistribution(rho / rho.sum())
        if it % 256 == 0:
            if not damped and residual > 0.9 * checkpoint_residual:
                # residual stalled: periodic chain, iterate (Id + P)/2 instead
                matrix = 0.5 * (np.eye(S) + P)
                damped = True
            checkpoint_residual = residual
        rho = rho @ matrix
        rho /= rho.sum()
    raise StationaryDistributionError(
        f"power iteration did not reach residual {tol} in {max_iter} steps"
    )


def backward_process(mrp: FiniteMrp, rho: StateDistribution, tol: float = 1e-8) -> FiniteMrp:
    """Time-reversed process: rho_s P_{ss'} = rho_{s'} (P_back)_{s's}.

    ``rho`` must be strictly positive and stationary for P (checked within
    ``tol``). Rewards are per-state and carry over unchanged. Reversing twice
    returns the original kernel.
    """
    if not rho.is_positive:
        raise ZeroMeasureStateError("backward process requires strictly positive rho")
    w = rho.weights
    residual = float(np.abs(w @ mrp.transition - w).sum())
    if residual > tol:
        raise NotStationaryError(f"rho is not stationary for P (L1 residual {residual:.3e})")
    p_back = (w[:, None] * mrp.transition).T / w[:, None]
    return FiniteMrp(
        num_states=mrp.num_states,
        transition=p_back,
        reward_mean=mrp.reward_mean,
        reward_noise_std=mrp.reward_noise_std,
        discount=mrp.discount,
    )


def sample_transition(
    mrp: FiniteMrp,
    rho: StateDistribution,
    rng: np.random.Generator,
    reward_noise: str = "gaussian",
) -> TransitionSample:
    """Draw one observation: s ~ rho, s' ~ P(s, .), r = R_s + noise.

    If row s is substochastic, the mass deficit triggers a terminal marker
    instead of a successor state. ``reward_noise`` selects Gaussian noise with
    std ``reward_noise_std[s]`` or, for experiments needing an almost-sure
    reward bound, uniform noise on [R_s - b, R_s + b] with b =
    ``reward_noise_std[s]``.
    """
    s = int(rng.choice(mrp.num_states, p=rho.weights))
    row = mrp.transition[s]
    mass = row.sum()
    u = rng.random()
    if u >= mass:
        to_state, terminal = s, True
    else:
        to_state, terminal = int(np.searchsorted(np.cumsum(row), u, side="right")), False
    sig = mrp.reward_noise_std[s]
    if sig == 0.0:
        r = mrp.reward_mean[s]
    elif reward_noise == "gaussian":
        r = mrp.reward_mean[s] + rng.normal(0.0, sig)
    elif reward_noise == "uniform":
        r = mrp.reward_mean[s] + rng.uniform(-sig, sig)
    else:
        raise ValueError(f"unknown reward_noise mode {reward_noise!r}")
    return TransitionSample(s, to_state, float(r), terminal)


def _check_policy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"policy must be {mdp.num_states}x{mdp.num_actions}")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-10):
        raise ValueError("policy rows must be distributions over actions")
    return pi


def mdp_to_mrp(mdp: FiniteMdp, policy: np.ndarray) -> FiniteMrp:
    """State process induced by a policy: P(s, s') = sum_a pi(s,a) P(s,a,s')."""
    pi = _check_policy(mdp, policy)
    P = np.einsum("sa,sap->sp", pi, mdp.transition)
    R = np.einsum("sa,sa->s", pi, mdp.reward_mean)
    return FiniteMrp(mdp.num_states, P, R, np.zeros(mdp.num_states), mdp.discount)


def mdp_to_state_action_mrp(mdp: FiniteMdp, policy: np.ndarray) -> FiniteMrp:
    """State-action process on S*A states: P((s,a),(s',a')) = P(s,a,s') pi(s',a').

    Pair (s, a) is flattened to index s * A + a.
    """
    pi = _check_policy(mdp, policy)
    S, A = mdp.num_states, mdp.num_actions
    P = np.einsum("sap,pb->sapb", mdp.transition, pi).reshape(S * A, S * A)
    R = mdp.reward_mean.reshape(S * A)
    return FiniteMrp(S * A, P, R, np.zeros(S * A), mdp.discount)


# ---------------------------------------------------------------------------
# JSON definition files
#
# MRP: {"states": S, "gamma": g, "P": [[...]], "R": [...], "noise": [...]}
# MDP adds "actions": A and uses a 3-D "P"; matrices are row-major lists.
# ---------------------------------------------------------------------------

def mrp_to_dict(mrp: FiniteMrp) -> dict:
    return {
        "states": mrp.num_states,
        "gamma": mrp.discount,
        "P": mrp.transition.tolist(),
        "R": mrp.reward_mean.tolist(),
        "noise": mrp.reward_noise_std.tolist(),
    }


def mrp_from_dict(d: dict) -> FiniteMrp:
    S = int(d["states"])
    return FiniteMrp(
        num_states=S,
        transition=np.array(d["P"], dtype=float),
        reward_mean=np.array(d.get("R", np.zeros(S)), dtype=float),
        reward_noise_std=np.array(d.get("noise", np.zeros(S)), dtype=float),
        discount=float(d["gamma"]),
    )


def mdp_to_dict(mdp: FiniteMdp) -> dict:
    return {
        "states": mdp.num_states,
        "actions": mdp.num_actions,
        "gamma": mdp.discount,
        "P": mdp.transition.tolist(),
        "R": mdp.reward_mean.tolist(),
    }


def mdp_from_dict(d: dict) -> FiniteMdp:
    return FiniteMdp(
        num_states=int(d["states"]),
        num_actions=int(d["actions"]),
        transition=np.array(d["P"], dtype=float),
        reward_mean=np.array(d["R"], dtype=float),
        discount=float(d["gamma"]),
    )


def save_process(path, process) -> None:
    d = mdp_to_dict(process) if isinstance(process, FiniteMdp) else mrp_to_dict(process)
    with open(path, "w") as f:
        json.dump(d, f)


def load_process(path):
    with open(path) as f:
        d = json.load(f)
    return mdp_from_dict(d) if "actions" in d else mrp_from_dict(d)
