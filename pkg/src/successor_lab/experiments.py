"""Declarative experiment runner with deterministic seeding and CSV/SVG output.

An ``ExperimentConfig`` names an experiment family, an environment spec, an
algorithm plus learner settings, seeds, and a step budget. ``run_experiment``
executes every seed (optionally in parallel), writes one CSV per seed with a
validated schema, an SVG error plot where the family defines one, and
finally a ``manifest.json`` as the completion marker. Identical (config,
seed) pairs produce byte-identical CSVs, serial or parallel: every seed owns
a counter-based RNG stream keyed by its seed and nothing else.

Families and their CSV schemas are listed in ``CSV_SCHEMAS``.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import envs, flows, goals, lowrank, newton
from . import learners as L
from . import mrp as mrp_mod
from . import process_estimation as pe
from .mrp import StateDistribution
from .svg import line_plot

__all__ = [
    "EXPERIMENT_KINDS",
    "CSV_SCHEMAS",
    "ExperimentConfig",
    "RunManifest",
    "run_experiment",
    "seed_stream",
    "write_csv",
]

ARTIFACT_VERSION = "0.1.0"

EXPERIMENT_KINDS = (
    "td-convergence",
    "estimate-bound",
    "newton-pathlen",
    "fb-fixedpoint",
    "flow-rates",
    "goal-grid",
    "trace-equivalence",
    "vm-identity",
    "relative-td",
    "dyadic-mass",
)

CSV_SCHEMAS = {
    "td-convergence": ["step", "sup_error", "tv_error"],
    "estimate-bound": [
        "trial_id", "t", "tv_error_m", "rho_error_v", "m_bound", "v_bound", "within_bound",
    ],
    "newton-pathlen": ["step", "n"],
    "fb-fixedpoint": [
        "variant", "rank", "td_residual", "svd_coincide", "svd_orthogonal",
        "image_stable", "projection_identity", "weak_inverse",
    ],
    "flow-rates": ["kind", "t", "frob_error", "tv_error", "fitted_rate"],
    "goal-grid": ["goal", "optimal_fraction", "value_max_err", "value_mean_err"],
    "trace-equivalence": ["cond_state", "component", "mc_mean", "predicted", "stderr", "z"],
    "vm-identity": ["step", "max_deviation"],
    "relative-td": ["step", "relative_error", "classic_norm"],
    "dyadic-mass": ["level", "mass", "closed_form", "abs_diff"],
}


def seed_stream(seed: int) -> np.random.Generator:
    """Counter-based stream for one seed; streams never overlap across seeds."""
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment run."""

    kind: str
    env: dict = field(default_factory=dict)
    algorithm: str = ""
    learner: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    steps: int = 1000
    out_dir: str = "out"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            kind=d["kind"],
            env=dict(d.get("env", {})),
            algorithm=d.get("algorithm", ""),
            learner=dict(d.get("learner", {})),
            seeds=tuple(d.get("seeds", (0,))),
            steps=int(d.get("steps", 1000)),
            out_dir=d.get("out_dir", "out"),
            extra=dict(d.get("extra", {})),
        )

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def learner_config(self, **overrides) -> L.LearnerConfig:
        kwargs = dict(self.learner)
        kwargs.update(overrides)
        return L.LearnerConfig(**kwargs)


@dataclass
class RunManifest:
    config_hash: str
    artifact_version: str
    outputs: dict  # seed -> [paths]
    timings: dict  # seed -> seconds
    failures: dict  # seed -> error string

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "artifact_version": self.artifact_version,
            "outputs": {str(k): v for k, v in self.outputs.items()},
            "timings": {str(k): v for k, v in self.timings.items()},
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def _fmt_cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, schema: list[str], rows: list[dict]) -> None:
    """Write rows under a validated schema with deterministic formatting."""
    for row in rows:
        if set(row) != set(schema):
            raise ValueError(f"row keys {sorted(row)} do not match schema {schema}")
    lines = [",".join(schema)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[col]) for col in schema))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Family runners. Each returns (rows, plot_series_or_None, report_or_None).
# ---------------------------------------------------------------------------

def _positive_uniform(S: int) -> StateDistribution:
    return StateDistribution(np.full(S, 1.0 / S))


def _run_td_convergence(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("td-convergence expects an MRP environment")
    cfg = config.learner_config(discount=env.discount)
    rho = _positive_uniform(env.num_states)
    m_star = mrp_mod.successor_exact(env)
    record_every = int(config.extra.get("record_every", max(1, config.steps // 200)))
    algo = config.algorithm or "forward-row"
    M = np.zeros((env.num_states, env.num_states))
    rows = []
    for step in range(config.steps):
        t = mrp_mod.sample_transition(env, rho, rng)
        if algo == "forward-row":
            M = L.forward_td_row(M, t, cfg, step)
        elif algo == "backward-full":
            M = L.backward_td_full(M, t, cfg, step)
        elif algo == "mixed":
            M = L.mixed_td_step(M, t, cfg, float(config.extra.get("mix", 0.5)), step)
        else:
            raise ValueError(f"unknown td-convergence algorithm {algo!r}")
        if step % record_every == 0 or step == config.steps - 1:
            rows.append(
                {
                    "step": step,
                    "sup_error": float(np.abs(M - m_star).max()),
                    "tv_error": mrp_mod.tv_norm(M, m_star, rho),
                }
            )
    series = [(algo, [r["step"] for r in rows], [r["sup_error"] for r in rows])]
    return rows, series, None


def _run_estimate_bound(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("estimate-bound expects an MRP environment")
    rho = mrp_mod.stationary_distribution(env)
    m_star = mrp_mod.successor_exact(env)
    v_star = mrp_mod.value_exact(env)
    t = int(config.extra.get("t", config.steps))
    delta = float(config.extra.get("delta", 0.05))
    trials = int(config.extra.get("trials", 10))
    edges = int(np.count_nonzero(env.transition))
    r_max = float(np.max(np.abs(env.reward_mean) + env.reward_noise_std))
    m_bound, v_bound = pe.estimation_error_bounds(
        env.num_states, edges, env.discount, r_max, t, delta
    )
    rows = []
    for trial in range(trials):
        est = pe.batch_estimate(env, rho, t, rng, reward_noise="uniform")
        tv_err = mrp_mod.tv_norm(est.m_hat, m_star, rho)
        v_err = float(rho.weights @ np.abs(est.value() - v_star))
        rows.append(
            {
                "trial_id": trial,
                "t": t,
                "tv_error_m": tv_err,
                "rho_error_v": v_err,
                "m_bound": m_bound,
                "v_bound": v_bound,
                "within_bound": bool(tv_err <= m_bound and v_err <= v_bound),
            }
        )
    return rows, None, None


def _run_newton_pathlen(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("newton-pathlen expects an MRP environment")
    algo = config.algorithm or "newton"
    steps = int(config.extra.get("operator_steps", 4))
    M = np.eye(env.num_states)
    max_n = 2 ** (steps + 1)
    rows = []
    for step in range(steps + 1):
        ok, n = flows.path_certificate(M, env, max_n, tol=1e-10)
        rows.append({"step": step, "n": n if ok else -1})
        if step == steps:
            break
        if algo == "newton":
            M = newton.newton_step(M, env, eta=1.0)
        elif algo == "forward":
            M = L.forward_operator_apply(M, env)
        elif algo == "backward":
            M = L.backward_operator_apply(M, env)
        else:
            raise ValueError(f"unknown newton-pathlen algorithm {algo!r}")
    return rows, None, None


def _run_fb_fixedpoint(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("fb-fixedpoint expects an MRP environment")
    variant = lowrank.FbVariant.parse(config.extra.get("variant", "fb"))
    rank = int(config.extra.get("rank", 2))
    S = env.num_states
    rho = _positive_uniform(S)
    init = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(2, rank, S))
    model = lowrank.FbModel(init[0], init[1], rho)
    model, converged, iters = lowrank.fb_fixed_point(
        model, env, variant, eta=float(config.extra.get("eta", 0.5))
    )
    report = lowrank.classify_fixed_point(model, env, variant)
    row = {
        "variant": report.variant,
        "rank": report.rank,
        "td_residual": report.td_residual,
        "svd_coincide": report.svd_coincide,
        "svd_orthogonal": report.svd_orthogonal,
        "image_stable": report.image_stable,
        "projection_identity": report.projection_identity,
        "weak_inverse": report.weak_inverse,
    }
    full = report.to_dict()
    full.update({"converged": converged, "iterations": iters})
    return [row], None, full


def _run_flow_rates(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("flow-rates expects an MRP environment")
    kinds = config.extra.get("kinds", ["forward", "newton"])
    t_end = float(config.extra.get("t_end", 40.0))
    step = float(config.extra.get("step", 5e-3))
    rho = _positive_uniform(env.num_states)
    m_star = mrp_mod.successor_exact(env)
    rows = []
    series = []
    spectral_report = {}
    for kind in kinds:
        m0 = np.eye(env.num_states) if kind == "newton" else np.zeros_like(m_star)
        traj = flows.integrate_flow(kind, env, m0, t_end, step, record_every=int(0.2 / step))
        errs = np.linalg.norm(traj.values - m_star, axis=(1, 2))
        fitted = flows.rate_fit(traj.times, errs)
        for i in range(traj.times.size):
            rows.append(
                {
                    "kind": kind,
                    "t": float(traj.times[i]),
                    "frob_error": float(errs[i]),
                    "tv_error": mrp_mod.tv_norm(traj.values[i], m_star, rho),
                    "fitted_rate": fitted,
                }
            )
        series.append((kind, traj.times.tolist(), errs.tolist()))
        if kind in ("forward", "backward", "mixed"):
            dec = flows.spectral_error(kind, env, m0 - m_star)
            spectral_report[kind] = {
                "eigenvalues_real": dec.eigenvalues.real.tolist(),
                "eigenvalues_imag": dec.eigenvalues.imag.tolist(),
                "fitted_rate": fitted,
            }
    return rows, series, spectral_report or None


def _run_goal_grid(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMdp):
        raise ValueError("goal-grid expects a gridworld MDP environment")
    width = int(config.env.get("width"))
    height = int(config.env.get("height"))
    obstacles = tuple(tuple(rc) for rc in config.env.get("obstacles", ()))
    epsilon = float(config.extra.get("epsilon", 0.2))
    c = float(config.extra.get("c", 25.0))
    S, A = env.num_states, env.num_actions
    next_state = np.argmax(env.transition, axis=2)  # deterministic moves
    q = np.zeros((S, A, S))
    counts = np.zeros((S, A), dtype=np.int64)
    gamma = env.discount
    cfg_template = L.LearnerConfig(learning_rate=1.0, schedule="c_over_c_plus_t", c=c,
                                   discount=gamma)
    behavior_goal = int(rng.integers(S))
    for _ in range(config.steps):
        if rng.random() < 0.05:
            behavior_goal = int(rng.integers(S))
        state = int(rng.integers(S))  # i.i.d. uniform start states
        if rng.random() < epsilon:
            action = int(rng.integers(A))
        else:
            action = int(q[state, :, behavior_goal].argmax())
        nxt = int(next_state[state, action])
        goal = int(rng.integers(S))
        counts[state, action] += 1
        goals.goal_q_td_step(q, state, action, nxt, goal, cfg_template,
                             int(counts[state, action]))
    dist = envs.bfs_distances(width, height, obstacles)
    policy = goals.greedy_policy(q)
    rows = []
    rho_g = 1.0 / S
    for g in range(S):
        q_star, _ = goals.per_goal_oracle(env, g)
        optimal = 0
        total = 0
        for start in range(S):
            if dist[start, g] < 0:
                continue
            total += 1
            steps_taken, cur = 0, start
            while cur != g and steps_taken <= 4 * S:
                cur = int(next_state[cur, policy[cur, g]])
                steps_taken += 1
            if cur == g and steps_taken == dist[start, g]:
                optimal += 1
        err = np.abs(q[:, :, g] * rho_g - q_star)
        rows.append(
            {
                "goal": g,
                "optimal_fraction": optimal / max(total, 1),
                "value_max_err": float(err.max()),
                "value_mean_err": float(err.mean()),
            }
        )
    return rows, None, None


def _run_trace_equivalence(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("trace-equivalence expects an MRP environment")
    rho = mrp_mod.stationary_distribution(env)
    cfg = config.learner_config(discount=env.discount, lam=1.0)
    S = env.num_states
    gl = cfg.discount * cfg.lam
    m_gl = np.linalg.solve(np.eye(S) - gl * env.transition, np.eye(S))
    predicted = m_gl * rho.weights[:, None] / rho.weights[None, :]  # (component, cond)
    burn_in = 10 * int(np.ceil(1.0 / (1.0 - cfg.discount)))
    n_blocks = int(config.extra.get("blocks", 100))
    block_len = max(1, config.steps // n_blocks)
    state = int(rng.choice(S, p=rho.weights))
    trace = np.zeros(S)
    for _ in range(burn_in):
        trace = gl * trace
        trace[state] += 1.0
        state = int(rng.choice(S, p=env.transition[state]))
    block_sums = np.zeros((n_blocks, S, S))
    block_counts = np.zeros((n_blocks, S))
    for b in range(n_blocks):
        for _ in range(block_len):
            trace = gl * trace
            trace[state] += 1.0
            block_sums[b, :, state] += trace
            block_counts[b, state] += 1
            state = int(rng.choice(S, p=env.transition[state]))
    rows = []
    for cond in range(S):
        counts = block_counts[:, cond]
        ok = counts > 0
        means = block_sums[ok, :, cond] / counts[ok, None]
        mc = means.mean(axis=0)
        stderr = means.std(axis=0, ddof=1) / np.sqrt(ok.sum())
        for comp in range(S):
            se = max(float(stderr[comp]), 1e-300)
            rows.append(
                {
                    "cond_state": cond,
                    "component": comp,
                    "mc_mean": float(mc[comp]),
                    "predicted": float(predicted[comp, cond]),
                    "stderr": float(stderr[comp]),
                    "z": float((mc[comp] - predicted[comp, cond]) / se),
                }
            )
    return rows, None, None


def _run_vm_identity(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("vm-identity expects an MRP environment")
    cfg = config.learner_config(discount=env.discount)
    report = L.coupled_td_run(env, config.steps, cfg, rng, record=True)
    rows = [
        {"step": i, "max_deviation": float(report.deviations[i])}
        for i in range(config.steps)
    ]
    return rows, None, None


def _run_relative_td(config, env, rng):
    if not isinstance(env, mrp_mod.FiniteMrp):
        raise ValueError("relative-td expects an MRP environment")
    gamma = float(config.extra.get("gamma", 1.0))
    cfg = config.learner_config(discount=gamma)
    S = env.num_states
    s_rel = int(config.extra.get("reference_state", 0))
    rho_rel = StateDistribution(np.eye(S)[s_rel])
    target = L.relative_successor_exact(env, rho_rel, gamma) @ env.reward_mean
    rho = _positive_uniform(S)
    v_rel = np.zeros(S)
    v_classic = np.zeros(S)
    record_every = max(1, config.steps // 200)
    rows = []
    for step in range(config.steps):
        t = mrp_mod.sample_transition(env, rho, rng)
        v_rel = L.relative_td_v(v_rel, t, s_rel, cfg, step)
        v_classic = L.td0_v(v_classic, t, cfg, step)
        if step % record_every == 0 or step == config.steps - 1:
            rows.append(
                {
                    "step": step,
                    "relative_error": float(np.abs(v_rel - target).max()),
                    "classic_norm": float(np.abs(v_classic).max()),
                }
            )
    series = [
        ("relative error", [r["step"] for r in rows], [r["relative_error"] for r in rows]),
        ("plain TD norm", [r["step"] for r in rows], [r["classic_norm"] for r in rows]),
    ]
    return rows, series, None


def _run_dyadic_mass(config, env, rng):
    depth = int(config.env.get("depth"))
    gamma = float(config.env.get("gamma"))
    levels = int(config.extra.get("levels", depth))
    masses = envs.dyadic_mass_profile(depth, gamma, levels)
    rows = []
    closed = 1.0
    for level in range(levels + 1):
        if level > 0:
            closed += gamma**level * 2 ** (level - 1)
        rows.append(
            {
                "level": level,
                "mass": float(masses[level]),
                "closed_form": float(closed),
                "abs_diff": float(abs(masses[level] - closed)),
            }
        )
    return rows, None, None


_RUNNERS = {
    "td-convergence": _run_td_convergence,
    "estimate-bound": _run_estimate_bound,
    "newton-pathlen": _run_newton_pathlen,
    "fb-fixedpoint": _run_fb_fixedpoint,
    "flow-rates": _run_flow_rates,
    "goal-grid": _run_goal_grid,
    "trace-equivalence": _run_trace_equivalence,
    "vm-identity": _run_vm_identity,
    "relative-td": _run_relative_td,
    "dyadic-mass": _run_dyadic_mass,
}


def _run_seed(config: ExperimentConfig, seed: int) -> list[str]:
    env = envs.build_env(config.env)
    rng = seed_stream(seed)
    rows, series, report = _RUNNERS[config.kind](config, env, rng)
    prefix = os.path.join(config.out_dir, f"{config.kind}-seed{seed}")
    outputs = []
    csv_path = prefix + ".csv"
    write_csv(csv_path, CSV_SCHEMAS[config.kind], rows)
    outputs.append(csv_path)
    if series:
        svg_path = prefix + ".svg"
        line_plot(
            svg_path,
            series,
            title=f"{config.kind} (seed {seed})",
            x_label="step" if config.kind != "flow-rates" else "t",
            y_label="error",
            log_y=True,
        )
        outputs.append(svg_path)
    if report is not None:
        json_path = prefix + "-report.json"
        with open(json_path, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        outputs.append(json_path)
    return outputs


def run_experiment(config: ExperimentConfig, parallel: int = 1) -> RunManifest:
    """Execute all seeds, then write the manifest (the completion marker).

    Per-seed failures are recorded in the manifest and do not stop the other
    seeds. Parallelism is capped by the SUCCESSOR_LAB_THREADS environment
    variable when it is set.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    cap = os.environ.get("SUCCESSOR_LAB_THREADS")
    workers = max(1, int(parallel))
    if cap is not None:
        workers = max(1, min(workers, int(cap)))
    outputs, timings, failures = {}, {}, {}

    def job(seed):
        start = time.perf_counter()
        try:
            files = _run_seed(config, seed)
            return seed, files, time.perf_counter() - start, None
        except Exception as exc:  # noqa: BLE001 - reported in the manifest
            return seed, [], time.perf_counter() - start, f"{type(exc).__name__}: {exc}"

    if workers == 1:
        results = [job(seed) for seed in config.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, config.seeds))
    for seed, files, elapsed, error in results:
        outputs[seed] = files
        timings[seed] = elapsed
        if error is not None:
            failures[seed] = error
    manifest = RunManifest(
        config_hash=config.config_hash(),
        artifact_version=ARTIFACT_VERSION,
        outputs=outputs,
        timings=timings,
        failures=failures,
    )
    with open(os.path.join(config.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    return manifest
