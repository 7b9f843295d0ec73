"""Continuous-time operator flows toward the successor matrix, their spectral
error decompositions, closed-form solutions, path-length certification, and
empirical decay-rate fitting.

With Delta = Id - gamma*P, the four matrix ODEs are

    forward:   dM/dt = Id - Delta M         (error e^{-t Delta} E0)
    backward:  dM/dt = Id - M Delta         (error E0 e^{-t Delta})
    mixed:     dM/dt = Id - (Delta M + M Delta)/2
    newton:    dM/dt = M - M Delta M

The first three are linear with rates given by the eigenvalues of Delta; the
Newton flow squares its error and decays at unit rate regardless of the
process once the error is small. Everything here is a pure function;
trajectories over parameter grids parallelize freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .mrp import FiniteMrp, laplacian

__all__ = [
    "FLOW_KINDS",
    "FlowState",
    "FlowTrajectory",
    "FlowBlowupError",
    "NonDiagonalizableError",
    "InsufficientDataError",
    "flow_rhs",
    "integrate_flow",
    "closed_form_flow",
    "SpectralDecomposition",
    "spectral_error",
    "dyad_rates",
    "slow_mode_multiplicity",
    "newton_mode",
    "newton_mode_diverges",
    "path_certificate",
    "rate_fit",
]

FLOW_KINDS = ("forward", "backward", "mixed", "newton")

BLOWUP_LIMIT = 1e6


class FlowBlowupError(RuntimeError):
    """Raised when a trajectory leaves the |M| <= 1e6 box (divergence regime)."""


class NonDiagonalizableError(RuntimeError):
    """Raised when the eigenvector basis is too ill-conditioned to trust."""


class InsufficientDataError(ValueError):
    """Raised when a rate fit has too few points in the small-error regime."""


@dataclass(frozen=True, eq=False)
class FlowState:
    time: float
    m: np.ndarray


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    """Recorded RK4 trajectory plus the worst step-halving error estimate."""

    times: np.ndarray  # (n,)
    values: np.ndarray  # (n, S, S)
    max_step_error: float

    @property
    def final(self) -> FlowState:
        return FlowState(float(self.times[-1]), self.values[-1])


def flow_rhs(kind: str, delta: np.ndarray) -> callable:
    eye = np.eye(delta.shape[0])
    if kind == "forward":
        return lambda M: eye - delta @ M
    if kind == "backward":
        return lambda M: eye - M @ delta
    if kind == "mixed":
        return lambda M: eye - 0.5 * (delta @ M + M @ delta)
    if kind == "newton":
        return lambda M: M - M @ delta @ M
    raise ValueError(f"kind must be one of {FLOW_KINDS}, got {kind!r}")


def integrate_flow(
    kind: str,
    mrp: FiniteMrp,
    m0: np.ndarray,
    t_end: float,
    step: float = 1e-3,
    record_every: int = 1,
    error_check_every: int = 200,
) -> FlowTrajectory:
    """Classical RK4 with fixed step and a step-halving error monitor.

    Every ``error_check_every`` steps the next step is recomputed as two
    half-steps and the discrepancy recorded; the maximum over the run is the
    trajectory's error estimate. Raises FlowBlowupError if any entry of M
    exceeds 1e6 in absolute value (the Newton divergence regime).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rhs = flow_rhs(kind, laplacian(mrp))

    def rk4(M, h):
        k1 = rhs(M)
        k2 = rhs(M + 0.5 * h * k1)
        k3 = rhs(M + 0.5 * h * k2)
        k4 = rhs(M + h * k3)
        return M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    n_steps = int(round(t_end / step))
    M = np.array(m0, dtype=float)
    times = [0.0]
    values = [M.copy()]
    max_err = 0.0
    for i in range(n_steps):
        if i % error_check_every == 0:
            coarse = rk4(M, step)
            fine = rk4(rk4(M, 0.5 * step), 0.5 * step)
            max_err = max(max_err, float(np.abs(coarse - fine).max()))
            M = fine
        else:
            M = rk4(M, step)
        if np.abs(M).max() > BLOWUP_LIMIT:
            raise FlowBlowupError(f"|M| exceeded {BLOWUP_LIMIT:g} at t={(i + 1) * step:g}")
        if (i + 1) % record_every == 0 or i == n_steps - 1:
            times.append((i + 1) * step)
            values.append(M.copy())
    return FlowTrajectory(np.array(times), np.array(values), max_err)


def closed_form_flow(kind: str, mrp: FiniteMrp, m0: np.ndarray, t: float) -> np.ndarray:
    """Closed-form solution of the flow at time t.

    forward / backward / mixed use the matrix exponential of Delta; newton
    uses the substitution gamma*P_t = Id - M_t^{-1}, which travels a straight
    line from P_0 to P at unit exponential rate (requires invertible m0).
    """
    delta = laplacian(mrp)
    m_inf = np.linalg.solve(delta, np.eye(delta.shape[0]))
    e0 = np.asarray(m0, dtype=float) - m_inf
    if kind == "forward":
        return m_inf + scipy.linalg.expm(-t * delta) @ e0
    if kind == "backward":
        return m_inf + e0 @ scipy.linalg.expm(-t * delta)
    if kind == "mixed":
        half = scipy.linalg.expm(-0.5 * t * delta)
        return m_inf + half @ e0 @ half
    if kind == "newton":
        gamma = mrp.discount
        if gamma == 0.0:
            raise ValueError("newton closed form needs gamma > 0")
        gp0 = np.eye(delta.shape[0]) - np.linalg.inv(np.asarray(m0, dtype=float))
        p0 = gp0 / gamma
        pt = mrp.transition + np.exp(-t) * (p0 - mrp.transition)
        return np.linalg.inv(np.eye(delta.shape[0]) - gamma * pt)
    raise ValueError(f"kind must be one of {FLOW_KINDS}, got {kind!r}")


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigendecomposition of Delta with the error expansion of E0.

    ``right_vectors`` holds right eigenvectors as columns, ``left_vectors``
    left eigenvectors as rows (the inverse of the right basis), and
    ``coefficients`` the dyad coefficients alpha with
    E0 = sum_ij alpha_ij u_i v_j^T. All arithmetic is complex; reported
    decay rates are real parts.
    """

    kind: str
    eigenvalues: np.ndarray  # (S,) complex
    right_vectors: np.ndarray  # (S, S) complex, columns
    left_vectors: np.ndarray  # (S, S) complex, rows
    coefficients: np.ndarray  # (S, S) complex

    def predict(self, t: float) -> np.ndarray:
        """Predicted error E_t from the dyad expansion (real part)."""
        lam = self.eigenvalues
        if self.kind == "forward":
            decay = np.exp(-t * lam)[:, None]
        elif self.kind == "backward":
            decay = np.exp(-t * lam)[None, :]
        elif self.kind == "mixed":
            decay = np.exp(-0.5 * t * (lam[:, None] + lam[None, :]))
        else:
            raise ValueError("spectral prediction covers the linear flows only")
        scaled = self.coefficients * decay
        return (self.right_vectors @ scaled @ self.left_vectors).real

    def reconstruction_residual(self, e0: np.ndarray) -> float:
        rec = (self.right_vectors @ self.coefficients @ self.left_vectors).real
        return float(np.abs(rec - e0).max())


def spectral_error(
    kind: str,
    mrp: FiniteMrp,
    e0: np.ndarray,
    max_condition: float = 1e8,
) -> SpectralDecomposition:
    """Decompose an initial error over the eigen-dyads of Delta.

    Raises NonDiagonalizableError when the eigenvector matrix condition
    number exceeds ``max_condition`` (repeated eigenvalues with nontrivial
    structure); the flows themselves still integrate in that case.
    """
    if kind not in ("forward", "backward", "mixed"):
        raise ValueError("spectral decomposition covers the linear flows only")
    delta = laplacian(mrp)
    lam, U = np.linalg.eig(delta)
    cond = float(np.linalg.cond(U))
    if cond > max_condition:
        raise NonDiagonalizableError(
            f"eigenvector condition number {cond:.3e} exceeds {max_condition:g}"
        )
    W = np.linalg.inv(U)
    alpha = W @ np.asarray(e0, dtype=complex) @ U
    return SpectralDecomposition(kind, lam, U, W, alpha)


def dyad_rates(kind: str, eigenvalues: np.ndarray) -> np.ndarray:
    """Decay rate (real part) of each dyad direction u_i v_j^T, as an SxS grid."""
    lam = np.asarray(eigenvalues)
    if kind == "forward":
        rates = np.broadcast_to(lam[:, None], (lam.size, lam.size))
    elif kind == "backward":
        rates = np.broadcast_to(lam[None, :], (lam.size, lam.size))
    elif kind == "mixed":
        rates = 0.5 * (lam[:, None] + lam[None, :])
    else:
        raise ValueError("dyad rates cover the linear flows only")
    return rates.real


def slow_mode_multiplicity(kind: str, eigenvalues: np.ndarray, rate: float, tol: float = 1e-9) -> int:
    """Number of dyad directions decaying at exactly ``rate`` (within tol)."""
    return int(np.sum(np.abs(dyad_rates(kind, eigenvalues) - rate) < tol))


def newton_mode(lam0: complex, t: float) -> complex:
    """Closed-form eigenvalue trajectory of the Newton error flow
    dlam/dt = -lam + lam^2: lam_t = 1 / (1 + e^t (1/lam0 - 1)).

    At the blow-up time of a divergent mode the denominator crosses zero and
    the returned value is infinite.
    """
    if lam0 == 0:
        return 0.0
    denom = 1.0 + np.exp(t) * (1.0 / complex(lam0) - 1.0)
    return 1.0 / denom


def newton_mode_diverges(lam0: complex, tol: float = 1e-12) -> tuple[bool, float | None]:
    """Whether the mode blows up in finite time, and when.

    Divergence happens exactly when 1/lam0 is a real number in (0, 1),
    i.e. lam0 is real and > 1; the blow-up time is log(lam0 / (lam0 - 1)).
    """
    lam0 = complex(lam0)
    if lam0 == 0:
        return False, None
    inv = 1.0 / lam0
    if abs(inv.imag) <= tol and 0.0 < inv.real < 1.0:
        return True, float(np.log(1.0 / (1.0 - inv.real)))
    return False, None


def path_certificate(M: np.ndarray, mrp: FiniteMrp, max_n: int, tol: float = 1e-9) -> tuple[bool, int]:
    """Certify M as an exact truncated path sum.

    Returns (True, n) for the largest n <= max_n with
    max |M - sum_{k<=n} gamma^k P^k| < tol, or (False, -1) if no horizon
    matches.
    """
    S = mrp.num_states
    gP = mrp.discount * mrp.transition
    partial = np.eye(S)
    term = np.eye(S)
    best = -1
    for n in range(max_n + 1):
        if n > 0:
            term = gP @ term
            partial = partial + term
        if np.abs(np.asarray(M) - partial).max() < tol:
            best = n
    return (best >= 0), best


def rate_fit(
    times: np.ndarray,
    errors: np.ndarray,
    regime: float = 0.1,
    floor: float = 1e-12,
    min_points: int = 10,
) -> float:
    """Least-squares exponential decay rate from an error series.

    Fits log(error) against t over the small-error regime (error below
    ``regime`` and above the float ``floor``) and returns the positive decay
    rate. Raises InsufficientDataError with fewer than ``min_points`` usable
    points.
    """
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = (errors < regime) & (errors > floor)
    if int(mask.sum()) < min_points:
        raise InsufficientDataError(
            f"only {int(mask.sum())} points in the fit regime (need {min_points})"
        )
    t = times[mask]
    y = np.log(errors[mask])
    slope = np.polyfit(t, y, 1)[0]
    return float(-slope)
