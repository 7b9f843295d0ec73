"""Newton-type updates for inverting Id - gamma*P, and value TD
preconditioned by a successor-density model.

The core map is M -> (1 + eta) M - eta * M (Id - gamma*P) M, the classical
Newton (Schulz) iteration for a matrix inverse relaxed by a step size. At
eta = 1 each exact step squares the inversion error, which on the path view
of the successor matrix doubles the certified path length per step (the TD
operators extend it by one). Three backends are provided:

* exact: applies the operator with the true transition matrix;
* sampled: a full-matrix update driven by one observed transition, unbiased
  for the rho-weighted operator on the density model m_tilde = M diag(rho)^-1;
* pointwise: the four-entry tabular form that additionally samples a source
  and a target state, matching the sampled backend in expectation.

The sampled forms are numerically fragile; a diagnostic guard warns (without
correcting) when the step size or the model norm leaves the regime where the
update is trustworthy.
"""

from __future__ import annotations

import warnings

import numpy as np

from .learners import LearnerConfig
from .mrp import FiniteMrp, StateDistribution, TransitionSample, laplacian

__all__ = [
    "newton_step",
    "newton_step_sampled",
    "newton_step_pointwise",
    "preconditioned_td_v",
]


def newton_step(M: np.ndarray, mrp: FiniteMrp, eta: float = 1.0) -> np.ndarray:
    """Exact relaxed Newton step (1 + eta) M - eta M (Id - gamma*P) M.

    M = 0 is a (degenerate) fixed point; from M = Id the eta = 1 iteration
    converges superexponentially to the true successor matrix.
    """
    return (1.0 + eta) * M - eta * M @ laplacian(mrp) @ M


def _stability_guard(m_tilde: np.ndarray, eta: float, reference_norm: float | None) -> None:
    norm = float(np.abs(m_tilde).max())
    if eta * norm * norm > 1.0:
        warnings.warn(
            f"sampled step outside the guard eta*|m|^2 <= 1 (eta={eta:g}, |m|={norm:g}); "
            "the update may be unstable",
            RuntimeWarning,
            stacklevel=3,
        )
    if reference_norm is not None and norm > 10.0 * reference_norm:
        warnings.warn(
            f"model norm {norm:g} grew past 10x the reference {reference_norm:g}; "
            "likely divergence",
            RuntimeWarning,
            stacklevel=3,
        )


def newton_step_sampled(
    m_tilde: np.ndarray,
    t: TransitionSample,
    gamma: float,
    eta: float,
    reference_norm: float | None = None,
) -> np.ndarray:
    """Full-matrix sampled step on the density model m_tilde = M diag(rho)^-1,
    driven by one observed transition s -> s':

        m <- (1 + eta) m - eta m[:, s] (x) m[s, :] + eta*gamma m[:, s] (x) m[s', :].

    Averaged over s ~ rho, s' ~ P it equals the rho-weighted relaxed Newton
    operator m <- (1+eta) m - eta m (diag(rho) - gamma diag(rho) P) m.
    """
    _stability_guard(m_tilde, eta, reference_norm)
    s, s2 = t.from_state, t.to_state
    out = (1.0 + eta) * m_tilde
    out -= eta * np.outer(m_tilde[:, s], m_tilde[s, :])
    if not t.terminal:
        out += eta * gamma * np.outer(m_tilde[:, s], m_tilde[s2, :])
    return out


def newton_step_pointwise(
    m: np.ndarray,
    t: TransitionSample,
    source: int,
    target: int,
    gamma: float,
    eta: float,
    reference_norm: float | None = None,
) -> np.ndarray:
    """Four-entry tabular step on the density model (M = Id + m diag(rho)),
    given one transition s -> s' and independent draws of a source s1 and a
    target s2:

        m[s,  s'] += eta * gamma
        m[s1, s'] += eta * gamma * m[s1, s]
        m[s,  s2] += eta * (gamma m[s', s2] - m[s, s2])
        m[s1, s2] += eta * m[s1, s] (gamma m[s', s2] - m[s, s2])
    """
    _stability_guard(m, eta, reference_norm)
    s, sp = t.from_state, t.to_state
    out = m.copy()
    gap = -m[s, target]
    if not t.terminal:
        out[s, sp] += eta * gamma
        out[source, sp] += eta * gamma * m[source, s]
        gap = gap + gamma * m[sp, target]
    out[s, target] += eta * gap
    out[source, target] += eta * m[source, s] * gap
    return out


def preconditioned_td_v(
    v: np.ndarray,
    m: np.ndarray,
    t: TransitionSample,
    cfg: LearnerConfig,
    sources: list[int] | None = None,
    rho: StateDistribution | None = None,
    step: int = 0,
) -> np.ndarray:
    """Value TD with the Bellman gap propagated to predecessor states.

    The gap r + gamma*V(s') - V(s) observed at s updates V(s) as usual and
    every source state s1 with weight m(s1, s), where m is a successor
    density model (M = Id + m diag(rho)). With m = 0 this is plain TD(0).

    ``sources`` gives sampled source states (each contributing with weight
    1/len(sources)); alternatively pass ``rho`` to apply the exact
    expectation over s1 ~ rho. The true value function is a fixed point in
    expectation whatever m is.
    """
    eta = cfg.rate(step)
    gamma = cfg.discount
    s = t.from_state
    boot = 0.0 if t.terminal else gamma * v[t.to_state]
    gap = t.reward + boot - v[s]
    out = v.copy()
    out[s] += eta * gap
    if sources is not None:
        w = eta * gap / len(sources)
        for s1 in sources:
            out[s1] += w * m[s1, s]
    elif rho is not None:
        out += eta * gap * rho.weights * m[:, s]
    return out
