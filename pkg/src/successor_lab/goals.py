"""Goal-conditioned optimal values at tabular scale.

A goal-Q tensor q(s, a, g) holds, for every goal state g, the optimal
action-value of the unit reward sitting at g. The optimal operator applies
the per-goal Bellman backup in parallel; its horizon-t iterates from zero
increase monotonically to the smallest fixed point. The sampled learners use
the key variance trick of this setting: the reward contribution of an update
is evaluated exactly at the goal just visited (g = s, or g = phi(s) for
feature goals) instead of waiting for a sampled goal to hit it, so no
1/rho_G factor ever appears inside an executed update.

Learned tensors are single-writer during learning (the step functions mutate
in place and return the tensor); the per-goal oracles are pure and
parallelize across goals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .learners import LearnerConfig
from .mrp import FiniteMdp, FiniteMrp, TransitionSample

__all__ = [
    "GoalTransition",
    "optimal_bellman_apply",
    "horizon_q",
    "goal_q_td_step",
    "goal_v_td_step",
    "feature_goal_td_step",
    "value_from_feature_goals",
    "per_goal_oracle",
    "per_goal_policy_evaluation",
    "greedy_policy",
    "write_goal_dataset",
    "read_goal_dataset",
    "write_policy_csv",
]


@dataclass(frozen=True)
class GoalTransition:
    """One goal-indexed observation (s -> s' | g)."""

    from_state: int
    to_state: int
    goal: int


def optimal_bellman_apply(q: np.ndarray, mdp: FiniteMdp) -> np.ndarray:
    """One optimal backup per goal:

        (Tq)(s, a, g) = 1_{s=g} + gamma * sum_{s'} P(s,a,s') max_{a'} q(s', a', g).
    """
    S, A = mdp.num_states, mdp.num_actions
    if q.shape != (S, A, S):
        raise ValueError(f"q must be {S}x{A}x{S}")
    best = q.max(axis=1)  # (s', g)
    out = np.einsum("sap,pg->sag", mdp.transition, best) * mdp.discount
    out += np.eye(S)[:, None, :]
    return out


def horizon_q(mdp: FiniteMdp, t: int) -> np.ndarray:
    """T^t applied to the zero tensor: the horizon-t goal-Q values.

    Entrywise nondecreasing in t; converges to the smallest solution of the
    fixed-point equation (for gamma < 1, the unique finite one).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    q = np.zeros((mdp.num_states, mdp.num_actions, mdp.num_states))
    for _ in range(t):
        q = optimal_bellman_apply(q, mdp)
    return q


def goal_q_td_step(
    q: np.ndarray,
    s: int,
    a: int,
    s_next: int,
    goal: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Sampled goal-Q update from one transition (s, a, s') and one drawn goal.

    The visited-goal entry takes the exact unit reward credit,
    q[s, a, s] += eta, and the drawn goal takes the bootstrap gap,
    q[s, a, g] += eta * (gamma * max_a' q[s', a', g] - q[s, a, g]); the gap
    uses pre-update values. Every executed increment is bounded by
    eta * (1 + (1 + gamma) * max|q|) regardless of the goal distribution.
    """
    eta = cfg.rate(step)
    gap = cfg.discount * q[s_next, :, goal].max() - q[s, a, goal]
    q[s, a, s] += eta
    q[s, a, goal] += eta * gap
    return q


def goal_v_td_step(
    v: np.ndarray,
    t: GoalTransition,
    phi: np.ndarray,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Sampled goal-V update from one goal-indexed transition (s -> s' | g),
    where s' follows the g-conditioned policy's kernel:

        v[s, phi(s)] += eta
        v[s, g] += eta * (gamma * v[s', g] - v[s, g])

    ``phi`` maps states to goal indices (identity for full state goals).
    """
    eta = cfg.rate(step)
    s, s2, g = t.from_state, t.to_state, t.goal
    gap = cfg.discount * v[s2, g] - v[s, g]
    v[s, phi[s]] += eta
    v[s, g] += eta * gap
    return v


def feature_goal_td_step(
    m_phi: np.ndarray,
    t: TransitionSample,
    phi: np.ndarray,
    goal: int,
    cfg: LearnerConfig,
    step: int = 0,
) -> np.ndarray:
    """Fixed-policy successor update over feature goals g = phi(s):

        m_phi[s, phi(s)] += eta
        m_phi[s, g] += eta * (gamma * m_phi[s', g] - m_phi[s, g])

    The fixed point pushes the successor matrix forward through phi: it
    satisfies m_phi(s, .) = delta_{phi(s)} + gamma * E_{s'} m_phi(s', .) up
    to the goal-distribution scaling.
    """
    eta = cfg.rate(step)
    s, s2 = t.from_state, t.to_state
    boot = 0.0 if t.terminal else cfg.discount * m_phi[s2, goal]
    gap = boot - m_phi[s, goal]
    m_phi[s, phi[s]] += eta
    m_phi[s, goal] += eta * gap
    return m_phi


def value_from_feature_goals(
    m_phi: np.ndarray,
    reward_on_goal: np.ndarray,
    tau: np.ndarray,
) -> np.ndarray:
    """Value readout for a reward that depends only on the goal feature:
    V(s) = sum_g tau(g) * m_phi(s, g) * R(g).
    """
    weights = np.asarray(tau, dtype=float) * np.asarray(reward_on_goal, dtype=float)
    return m_phi @ weights


def per_goal_oracle(
    mdp: FiniteMdp,
    goal: int,
    tol: float = 1e-10,
    max_iter: int = 1_000_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Independent test oracle: dense value iteration for the reward 1_{s=goal}.

    Returns (q_star, greedy) with q_star of shape (S, A) and the greedy
    policy breaking argmax ties toward the lowest action index. Iterates to a
    sup-norm residual below ``tol`` (always reached for gamma < 1).
    """
    S, A = mdp.num_states, mdp.num_actions
    reward = np.eye(S)[:, goal]
    q = np.zeros((S, A))
    for _ in range(max_iter):
        backup = reward[:, None] + mdp.discount * np.einsum(
            "sap,p->sa", mdp.transition, q.max(axis=1)
        )
        if np.abs(backup - q).max() < tol:
            q = backup
            break
        q = backup
    return q, q.argmax(axis=1)


def per_goal_policy_evaluation(mrp: FiniteMrp, goal: int) -> np.ndarray:
    """Exact value of the fixed process for the reward 1_{s=goal}."""
    S = mrp.num_states
    delta = np.eye(S) - mrp.discount * mrp.transition
    return np.linalg.solve(delta, np.eye(S)[:, goal])


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Per-goal greedy actions from a goal-Q tensor: (S, G) of action indices,
    ties toward the lowest index."""
    return q.argmax(axis=1)


# ---------------------------------------------------------------------------
# Dataset and policy files.
#
# Goal dataset: CSV rows s,a,s',g for Q-mode, s,s',g for V-mode.
# Policy export: CSV rows g,s,action.
# ---------------------------------------------------------------------------

def write_goal_dataset(path, rows: list[tuple]) -> None:
    width = len(rows[0]) if rows else 4
    header = ["s", "a", "s_next", "g"] if width == 4 else ["s", "s_next", "g"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_goal_dataset(path) -> list[tuple]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        return [tuple(int(x) for x in row) for row in reader]


def write_policy_csv(path, policy: np.ndarray) -> None:
    """Policy export: one row per (goal, state) with the greedy action.

    Accepts an (S, G) table of per-goal actions or a length-S vector (a
    single-goal policy, exported under goal index 0).
    """
    table = policy if policy.ndim == 2 else policy[:, None]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["g", "s", "action"])
        for g in range(table.shape[1]):
            for s in range(table.shape[0]):
                writer.writerow([g, s, int(table[s, g])])
