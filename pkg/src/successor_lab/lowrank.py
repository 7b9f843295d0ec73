"""Rank-r factorized models of the successor matrix: M ~ F^T B diag(rho).

F holds r forward features per state (columns) and B r backward features;
their pairing approximates the successor density m_tilde(s1, s2) =
F(s1)^T B(s2). Each factor can be trained with the forward or the backward
TD rule, giving four variants (ff, fb, bf, bb) whose fixed points have
different geometry in L2(rho):

* fb: truncated singular value decompositions of the true operator -- local
  minimizers of the factorization error;
* ff: restrictions of the true operator to one of its invariant subspaces;
* bb: rho-orthogonal projections of the true operator onto a co-invariant
  subspace;
* bf: weak inverses of the projected operator on an arbitrary subspace.

A Newton-style factor update is also provided; its first-order effect on
F^T B diag(rho) is the relaxed Newton step on the full matrix, and for
symmetric P with a commuting initialization the TD factor flows themselves
reproduce that Newton flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .mrp import FiniteMrp, StateDistribution, TransitionSample, laplacian

__all__ = [
    "FbVariant",
    "FbModel",
    "RewardEmbedding",
    "OnlineFbStats",
    "NotAFixedPointError",
    "fb_delta_exact",
    "fb_delta_sampled",
    "fb_td_step_exact",
    "fb_td_step",
    "fb_fixed_point",
    "fb_newton_delta_exact",
    "fb_newton_step_sampled",
    "newton_cross_stat",
    "fb_value_exact",
    "reward_embedding_stream",
    "truncated_svd_oracle",
    "FixedPointReport",
    "classify_fixed_point",
    "fb_vs_newton_flow",
    "FlowMatchReport",
    "save_fb_checkpoint",
    "load_fb_checkpoint",
]

RULES = ("forward", "backward")


@dataclass(frozen=True)
class FbVariant:
    """Which TD rule trains each factor."""

    f_rule: str
    b_rule: str

    def __post_init__(self):
        if self.f_rule not in RULES or self.b_rule not in RULES:
            raise ValueError(f"rules must be in {RULES}")

    @classmethod
    def parse(cls, code: str) -> "FbVariant":
        """Parse 'ff', 'fb', 'bf', or 'bb' (F rule first, B rule second)."""
        names = {"f": "forward", "b": "backward"}
        if len(code) != 2 or code[0] not in names or code[1] not in names:
            raise ValueError(f"variant code must be two of 'f'/'b', got {code!r}")
        return cls(names[code[0]], names[code[1]])

    @property
    def code(self) -> str:
        return self.f_rule[0] + self.b_rule[0]


@dataclass(frozen=True, eq=False)
class FbModel:
    """Factor pair (F, B) with the sampling distribution of the model."""

    f: np.ndarray  # (r, S)
    b: np.ndarray  # (r, S)
    rho: StateDistribution

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if f.ndim != 2 or f.shape != b.shape:
            raise ValueError("f and b must be r x S arrays of equal shape")
        if f.shape[1] != self.rho.num_states:
            raise ValueError("factor width must match the distribution")
        if f.shape[0] == 0:
            raise ValueError("rank must be positive")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.f.shape[0]

    @property
    def num_states(self) -> int:
        return self.f.shape[1]

    def density(self) -> np.ndarray:
        """m_tilde = F^T B, the model of the successor density."""
        return self.f.T @ self.b

    def operator(self) -> np.ndarray:
        """The modeled successor matrix F^T B diag(rho)."""
        return self.density() * self.rho.weights[None, :]


@dataclass(frozen=True)
class RewardEmbedding:
    """Reward representation b_of_r ~ E_{s~rho}[r_s B(s)]; pairs with F to
    read out a value function as V(s) = F(s)^T b_of_r."""

    b_of_r: np.ndarray
    num_samples: int = 0


class NotAFixedPointError(RuntimeError):
    """Raised when classification is asked of a model whose exact TD update
    has not vanished."""


def _stat_matrices(model: FbModel, mrp: FiniteMrp) -> dict:
    """Exact second-moment and Bellman-gap statistics of the factors."""
    rho_hat = model.rho.diag()
    delta = laplacian(mrp)
    F, B = model.f, model.b
    return {
        "sigma_b": B @ rho_hat @ B.T,
        "sigma_f": F @ rho_hat @ F.T,
        "d_f": -F @ rho_hat @ delta @ F.T,
        "d_b": -B @ delta.T @ rho_hat @ B.T,
    }


def fb_delta_exact(model: FbModel, mrp: FiniteMrp, variant: FbVariant) -> tuple[np.ndarray, np.ndarray]:
    """Exact expected TD updates (delta_F, delta_B) for the chosen variant.

    forward on F:  delta_F = B rho_hat - Sigma_B F Delta^T rho_hat
    forward on B:  delta_B = F rho_hat - F rho_hat Delta F^T B rho_hat
    backward on F: delta_F = B rho_hat - B Delta^T rho_hat B^T F rho_hat
    backward on B: delta_B = F rho_hat - Sigma_F B rho_hat Delta
    """
    rho_hat = model.rho.diag()
    delta = laplacian(mrp)
    F, B = model.f, model.b
    sigma_b = B @ rho_hat @ B.T
    sigma_f = F @ rho_hat @ F.T
    if variant.f_rule == "forward":
        d_f = B @ rho_hat - sigma_b @ F @ delta.T @ rho_hat
    else:
        d_f = B @ rho_hat - B @ delta.T @ rho_hat @ B.T @ F @ rho_hat
    if variant.b_rule == "forward":
        d_b = F @ rho_hat - F @ rho_hat @ delta @ F.T @ B @ rho_hat
    else:
        d_b = F @ rho_hat - sigma_f @ B @ rho_hat @ delta
    return d_f, d_b


def fb_delta_sampled(
    model: FbModel,
    variant: FbVariant,
    t: TransitionSample,
    gamma: float,
    sigma_b: np.ndarray,
    sigma_f: np.ndarray,
    d_f: np.ndarray,
    d_b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-transition factor updates using supplied statistic matrices.

    Purely trajectory-wise: only the observed transition s -> s' enters, no
    independent extra state. With the exact statistics, the expectation over
    s ~ rho, s' ~ P reproduces ``fb_delta_exact``.
    """
    F, B = model.f, model.b
    s, s2 = t.from_state, t.to_state
    delta_f = np.zeros_like(F)
    delta_b = np.zeros_like(B)
    boot_f = np.zeros(model.rank) if t.terminal else gamma * F[:, s2]
    if variant.f_rule == "forward":
        delta_f[:, s] = B[:, s] + sigma_b @ (boot_f - F[:, s])
    else:
        delta_f[:, s] = B[:, s] + d_b @ F[:, s]
    if variant.b_rule == "forward":
        delta_b[:, s] = F[:, s] + d_f @ B[:, s]
    else:
        delta_b[:, s] = F[:, s] - sigma_f @ B[:, s]
        if not t.terminal:
            delta_b[:, s2] += gamma * sigma_f @ B[:, s]
    return delta_f, delta_b


class OnlineFbStats:
    """Exponential moving averages of the factor statistics.

    The first ``warmup`` transitions are plainly averaged, after which the
    estimates decay with the given factor per update.
    """

    def __init__(self, rank: int, decay: float = 0.99, warmup: int = 100):
        self.decay = decay
        self.warmup = warmup
        self.count = 0
        self.sigma_b = np.zeros((rank, rank))
        self.sigma_f = np.zeros((rank, rank))
        self.d_f = np.zeros((rank, rank))
        self.d_b = np.zeros((rank, rank))

    def update(self, model: FbModel, t: TransitionSample, gamma: float) -> None:
        F, B = model.f, model.b
        s, s2 = t.from_state, t.to_state
        boot_f = np.zeros(model.rank) if t.terminal else gamma * F[:, s2]
        boot_b = np.zeros(model.rank) if t.terminal else gamma * B[:, s2]
        inst = {
            "sigma_b": np.outer(B[:, s], B[:, s]),
            "sigma_f": np.outer(F[:, s], F[:, s]),
            "d_f": np.outer(F[:, s], boot_f - F[:, s]),
            "d_b": np.outer(boot_b - B[:, s], B[:, s]),
        }
        self.count += 1
        w = 1.0 / self.count if self.count <= self.warmup else 1.0 - self.decay
        for name, value in inst.items():
            old = getattr(self, name)
            setattr(self, name, (1.0 - w) * old + w * value)


def fb_td_step_exact(model: FbModel, mrp: FiniteMrp, variant: FbVariant, eta: float) -> FbModel:
    d_f, d_b = fb_delta_exact(model, mrp, variant)
    return replace(model, f=model.f + eta * d_f, b=model.b + eta * d_b)


def fb_td_step(
    model: FbModel,
    variant: FbVariant,
    t: TransitionSample,
    gamma: float,
    eta: float,
    stats: OnlineFbStats,
) -> FbModel:
    """Sampled TD step: refresh the moving-average statistics with the
    incoming transition, then update both factors from the pre-step values.
    """
    stats.update(model, t, gamma)
    d_f, d_b = fb_delta_sampled(
        model, variant, t, gamma, stats.sigma_b, stats.sigma_f, stats.d_f, stats.d_b
    )
    return replace(model, f=model.f + eta * d_f, b=model.b + eta * d_b)


def fb_fixed_point(
    model: FbModel,
    mrp: FiniteMrp,
    variant: FbVariant,
    eta: float = 0.5,
    tol: float = 1e-8,
    patience: int = 100,
    max_iter: int = 200_000,
    freeze: tuple = (),
) -> tuple[FbModel, bool, int]:
    """Iterate the exact expected updates until they stay below ``tol`` for
    ``patience`` consecutive evaluations.

    ``freeze`` can name 'f' and/or 'b' to keep a factor fixed (used to reach
    bf-style fixed points inside a prescribed feature span).
    """
    quiet = 0
    for it in range(max_iter):
        d_f, d_b = fb_delta_exact(model, mrp, variant)
        if "f" in freeze:
            d_f = np.zeros_like(d_f)
        if "b" in freeze:
            d_b = np.zeros_like(d_b)
        size = max(np.abs(d_f).max(), np.abs(d_b).max())
        if size < tol:
            quiet += 1
            if quiet >= patience:
                return model, True, it + 1
        else:
            quiet = 0
        model = replace(model, f=model.f + eta * d_f, b=model.b + eta * d_b)
    return model, False, max_iter


def fb_newton_delta_exact(model: FbModel, mrp: FiniteMrp) -> tuple[np.ndarray, np.ndarray]:
    """Newton-style factor updates whose first-order effect on F^T B rho_hat
    is the relaxed Newton step on the modeled matrix:

        delta_F = F - F Delta^T rho_hat B^T F,  delta_B = B - B rho_hat Delta F^T B.

    Both preserve the kernels (row spans) of F and B: no new features appear.
    """
    rho_hat = model.rho.diag()
    delta = laplacian(mrp)
    F, B = model.f, model.b
    cross = B @ rho_hat @ delta @ F.T  # r x r
    return F - cross.T @ F, B - cross @ B


def newton_cross_stat(model: FbModel, t: TransitionSample, gamma: float) -> np.ndarray:
    """Single-transition estimate of B rho_hat Delta F^T = E[B(s)(F(s) - gamma F(s'))^T]."""
    F, B = model.f, model.b
    s, s2 = t.from_state, t.to_state
    boot = np.zeros(model.rank) if t.terminal else gamma * F[:, s2]
    return np.outer(B[:, s], F[:, s] - boot)


def fb_newton_step_sampled(
    model: FbModel,
    cross: np.ndarray,
    source: int,
    eta: float,
) -> FbModel:
    """Sampled Newton factor step at one source state s1 ~ rho:

        F[:, s1] += eta * (F(s1) - cross^T F(s1))
        B[:, s1] += eta * (B(s1) - cross B(s1))

    where ``cross`` estimates B rho_hat Delta F^T (single transition via
    ``newton_cross_stat`` or a moving average).
    """
    f = model.f.copy()
    b = model.b.copy()
    f[:, source] += eta * (model.f[:, source] - cross.T @ model.f[:, source])
    b[:, source] += eta * (model.b[:, source] - cross @ model.b[:, source])
    return replace(model, f=f, b=b)


def fb_value_exact(model: FbModel, rewards: np.ndarray) -> tuple[RewardEmbedding, np.ndarray]:
    """Value readout with the exact reward embedding B rho_hat R."""
    b_of_r = model.b @ (model.rho.weights * np.asarray(rewards, dtype=float))
    return RewardEmbedding(b_of_r), model.f.T @ b_of_r


def reward_embedding_stream(
    model: FbModel,
    samples: list[tuple[int, float]],
) -> tuple[RewardEmbedding, np.ndarray]:
    """Value readout from a stream of (state, reward) pairs with s ~ rho:
    the embedding is the running average of r * B(s)."""
    acc = np.zeros(model.rank)
    for i, (s, r) in enumerate(samples, start=1):
        acc += (r * model.b[:, s] - acc) / i
    emb = RewardEmbedding(acc, len(samples))
    return emb, model.f.T @ emb.b_of_r


def _conjugate(mat: np.ndarray, rho: StateDistribution) -> np.ndarray:
    """Map an operator on L2(rho) to the Euclidean side: diag(rho)^{1/2} A diag(rho)^{-1/2}."""
    root = np.sqrt(rho.weights)
    return mat * root[:, None] / root[None, :]


def _unconjugate(mat: np.ndarray, rho: StateDistribution) -> np.ndarray:
    root = np.sqrt(rho.weights)
    return mat / root[:, None] * root[None, :]


def truncated_svd_oracle(M: np.ndarray, rho: StateDistribution, r: int) -> np.ndarray:
    """Best rank-r approximation of M in the L2(rho) Hilbert-Schmidt norm.

    Computed by a dense SVD of the rho^{1/2}-conjugated matrix (which makes
    L2(rho) geometry Euclidean) and conjugating back. Ties in singular values
    are broken by index order, keeping the first r of the descending
    sequence.
    """
    if not rho.is_positive:
        raise ZeroDivisionError("truncated SVD oracle needs strictly positive rho")
    if r <= 0:
        return np.zeros_like(np.asarray(M, dtype=float))
    a = _conjugate(np.asarray(M, dtype=float), rho)
    u, s, vt = np.linalg.svd(a)
    k = min(r, s.size)
    trunc = (u[:, :k] * s[:k]) @ vt[:k]
    return _unconjugate(trunc, rho)


@dataclass(frozen=True)
class FixedPointReport:
    """Residuals of the fixed-point characterizations, all measured in the
    conjugated (Euclidean) geometry with max-abs norms.

    * ``svd_coincide``: the model equals the true operator on the
      orthocomplement of its kernel;
    * ``svd_orthogonal``: the true operator maps the model's kernel
      orthogonally to the model's image;
    * ``image_stable``: the model's image is invariant under the true
      operator;
    * ``projection_identity``: the model is the orthogonal projection of the
      true operator onto its image;
    * ``weak_inverse``: the model inverts the image-projected Laplacian.
    """

    variant: str
    rank: int
    effective_rank: int
    td_residual: float
    svd_coincide: float
    svd_orthogonal: float
    image_stable: float
    projection_identity: float
    weak_inverse: float
    singular_gap: float
    tolerance_scale: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def classify_fixed_point(
    model: FbModel,
    mrp: FiniteMrp,
    variant: FbVariant,
    fixed_point_tol: float = 1e-6,
    rank_tol: float = 1e-9,
) -> FixedPointReport:
    """Measure which fixed-point characterizations the model satisfies.

    Raises NotAFixedPointError when the exact expected TD update of the
    given variant is larger than ``fixed_point_tol``. When the true
    operator's singular values have a gap below 1e-6 at the truncation rank,
    comparisons are reported with a 10x widened tolerance scale.
    """
    d_f, d_b = fb_delta_exact(model, mrp, variant)
    td_residual = float(max(np.abs(d_f).max(), np.abs(d_b).max()))
    if td_residual > fixed_point_tol:
        raise NotAFixedPointError(
            f"exact TD update residual {td_residual:.3e} exceeds {fixed_point_tol:g}"
        )
    rho = model.rho
    m_true = np.linalg.solve(laplacian(mrp), np.eye(mrp.num_states))
    a = _conjugate(m_true, rho)
    x = _conjugate(model.operator(), rho)
    d_conj = _conjugate(laplacian(mrp), rho)

    u, s, vt = np.linalg.svd(x)
    scale = max(float(s[0]), 1.0)
    eff_rank = int(np.sum(s > scale * rank_tol))
    u_r = u[:, :eff_rank]
    v_r = vt[:eff_rank].T
    p_row = v_r @ v_r.T  # projector onto (Ker x)^perp
    p_ker = np.eye(x.shape[0]) - p_row
    p_im = u_r @ u_r.T  # projector onto Im x

    svd_coincide = float(np.abs((a - x) @ p_row).max())
    svd_orthogonal = float(np.abs(p_im @ a @ p_ker).max())
    image_stable = float(np.abs((np.eye(x.shape[0]) - p_im) @ a @ p_im).max())
    projection_identity = float(np.abs(x - p_im @ a).max())
    core = p_im @ d_conj @ p_im
    weak_inverse = float(
        max(np.abs(x @ core - p_im).max(), np.abs(core @ x - p_im).max())
    )

    a_s = np.linalg.svd(a, compute_uv=False)
    if eff_rank < a_s.size:
        singular_gap = float(a_s[eff_rank - 1] - a_s[eff_rank]) if eff_rank >= 1 else float(a_s[0])
    else:
        singular_gap = float("inf")
    tolerance_scale = 10.0 if singular_gap < 1e-6 else 1.0

    return FixedPointReport(
        variant=variant.code,
        rank=model.rank,
        effective_rank=eff_rank,
        td_residual=td_residual,
        svd_coincide=svd_coincide,
        svd_orthogonal=svd_orthogonal,
        image_stable=image_stable,
        projection_identity=projection_identity,
        weak_inverse=weak_inverse,
        singular_gap=singular_gap,
        tolerance_scale=tolerance_scale,
    )


@dataclass(frozen=True)
class FlowMatchReport:
    symmetric: bool
    initial_commutator: float
    max_divergence: float
    times: np.ndarray
    divergences: np.ndarray


def fb_vs_newton_flow(
    mrp: FiniteMrp,
    variant: FbVariant,
    f0: np.ndarray | None = None,
    b0: np.ndarray | None = None,
    t_end: float = 10.0,
    step: float = 1e-3,
    record_every: int = 100,
    allow_asymmetric: bool = False,
) -> FlowMatchReport:
    """Co-integrate the factor TD flow and the matrix Newton flow and record
    their divergence.

    For symmetric P, uniform rho, F0 = B0, and Delta commuting with F0^T B0
    (defaults: identity factors), the modeled matrix F_t^T B_t rho_hat
    follows the Newton flow with rate 2/S exactly; an asymmetric P is
    rejected unless ``allow_asymmetric`` (the negative control, where the
    divergence grows).
    """
    S = mrp.num_states
    symmetric = bool(np.allclose(mrp.transition, mrp.transition.T, atol=1e-12))
    if not symmetric and not allow_asymmetric:
        raise ValueError("transition matrix must be symmetric for the flow match")
    rho = StateDistribution(np.full(S, 1.0 / S))
    F = np.eye(S) if f0 is None else np.array(f0, dtype=float)
    B = np.eye(S) if b0 is None else np.array(b0, dtype=float)
    delta = laplacian(mrp)
    model0 = FbModel(F, B, rho)
    commutator = float(np.abs(delta @ model0.density() - model0.density() @ delta).max())

    eta = 2.0 / S
    M = model0.operator()

    def fb_rhs(F, B):
        return fb_delta_exact(FbModel(F, B, rho), mrp, variant)

    def newton_rhs(M):
        return eta * (M - M @ delta @ M)

    n_steps = int(round(t_end / step))
    times = [0.0]
    divs = [0.0]
    for i in range(n_steps):
        # joint RK4 on (F, B), matched RK4 on M
        k1f, k1b = fb_rhs(F, B)
        k2f, k2b = fb_rhs(F + 0.5 * step * k1f, B + 0.5 * step * k1b)
        k3f, k3b = fb_rhs(F + 0.5 * step * k2f, B + 0.5 * step * k2b)
        k4f, k4b = fb_rhs(F + step * k3f, B + step * k3b)
        F = F + (step / 6.0) * (k1f + 2 * k2f + 2 * k3f + k4f)
        B = B + (step / 6.0) * (k1b + 2 * k2b + 2 * k3b + k4b)
        m1 = newton_rhs(M)
        m2 = newton_rhs(M + 0.5 * step * m1)
        m3 = newton_rhs(M + 0.5 * step * m2)
        m4 = newton_rhs(M + step * m3)
        M = M + (step / 6.0) * (m1 + 2 * m2 + 2 * m3 + m4)
        if (i + 1) % record_every == 0 or i == n_steps - 1:
            times.append((i + 1) * step)
            divs.append(float(np.abs(FbModel(F, B, rho).operator() - M).max()))
    divs_arr = np.array(divs)
    return FlowMatchReport(
        symmetric=symmetric,
        initial_commutator=commutator,
        max_divergence=float(divs_arr.max()),
        times=np.array(times),
        divergences=divs_arr,
    )


# ---------------------------------------------------------------------------
# Checkpoint files: {"r": r, "F": [[...]], "B": [[...]], "rho": [...]}
# ---------------------------------------------------------------------------

def save_fb_checkpoint(path, model: FbModel) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "r": model.rank,
                "F": model.f.tolist(),
                "B": model.b.tolist(),
                "rho": model.rho.weights.tolist(),
            },
            f,
        )


def load_fb_checkpoint(path) -> FbModel:
    with open(path) as f:
        d = json.load(f)
    model = FbModel(
        np.array(d["F"], dtype=float),
        np.array(d["B"], dtype=float),
        StateDistribution(np.array(d["rho"], dtype=float)),
    )
    if model.rank != int(d["r"]):
        raise ValueError("checkpoint rank field disagrees with the factor shapes")
    return model
