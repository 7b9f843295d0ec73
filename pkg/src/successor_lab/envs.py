"""Benchmark environment constructors and their structural oracles.

Available environments:

* ``torus(n, gamma)``: random walk on a ring, +-1 step with probability 1/2
  each -- symmetric, doubly stochastic, with a closed-form spectrum;
* ``random_mrp(num_states, density, seed, ...)``: Dirichlet rows on a random
  support, kept irreducible by always including the ring edge;
* ``gridworld(width, height, obstacles, gamma)``: 4-action deterministic
  moves with wall/obstacle bounce;
* ``dyadic_tree(depth, gamma)``: binary tree, two actions descending to the
  children, leaves looping on themselves.

``build_env`` constructs any of them from a JSON-style spec dict.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .mrp import FiniteMdp, FiniteMrp

__all__ = [
    "InvalidSpecError",
    "torus",
    "random_mrp",
    "gridworld",
    "grid_index",
    "grid_coords",
    "bfs_distances",
    "dyadic_tree",
    "dyadic_mass_profile",
    "build_env",
]


class InvalidSpecError(ValueError):
    """Raised for malformed environment specs."""


def torus(n: int, gamma: float, reward=None, noise=None) -> FiniteMrp:
    """Random walk on {0..n-1} with wraparound: step +-1 w.p. 1/2 each."""
    if n < 2:
        raise InvalidSpecError("torus needs at least 2 states")
    P = np.zeros((n, n))
    for i in range(n):
        P[i, (i + 1) % n] += 0.5
        P[i, (i - 1) % n] += 0.5
    R = np.zeros(n) if reward is None else np.asarray(reward, dtype=float)
    sig = np.zeros(n) if noise is None else np.asarray(noise, dtype=float)
    return FiniteMrp(n, P, R, sig, gamma)


def random_mrp(
    num_states: int,
    density: float,
    seed: int,
    gamma: float = 0.9,
    reward: str = "normal",
    noise_std: float = 0.0,
) -> FiniteMrp:
    """Random irreducible MRP: each row gets Dirichlet weights on a random
    support of about density * S states, always including the ring successor
    so the chain stays irreducible.
    """
    if not (0.0 < density <= 1.0):
        raise InvalidSpecError("density must lie in (0, 1]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    S = num_states
    k = max(1, int(round(density * S)))
    P = np.zeros((S, S))
    for i in range(S):
        support = set(rng.choice(S, size=k, replace=False).tolist())
        support.add((i + 1) % S)
        support = sorted(support)
        P[i, support] = rng.dirichlet(np.ones(len(support)))
    if reward == "normal":
        R = rng.normal(0.0, 1.0, S)
    elif reward == "zeros":
        R = np.zeros(S)
    else:
        raise InvalidSpecError(f"unknown reward mode {reward!r}")
    return FiniteMrp(S, P, R, np.full(S, float(noise_std)), gamma)


# gridworld actions: 0 up, 1 down, 2 left, 3 right (row, col) coordinates
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def grid_index(row: int, col: int, width: int) -> int:
    return row * width + col


def grid_coords(state: int, width: int) -> tuple[int, int]:
    return divmod(state, width)


def gridworld(
    width: int,
    height: int,
    obstacles: tuple = (),
    gamma: float = 0.9,
) -> FiniteMdp:
    """Deterministic gridworld: moving off the board or into an obstacle
    keeps the state. Obstacle cells remain states (never entered, never
    left); pass them as (row, col) pairs.
    """
    if width < 1 or height < 1:
        raise InvalidSpecError("grid must be at least 1x1")
    blocked = {grid_index(r, c, width) for r, c in obstacles}
    S = width * height
    A = len(GRID_MOVES)
    P = np.zeros((S, A, S))
    for s in range(S):
        r, c = grid_coords(s, width)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            nr, nc = r + dr, c + dc
            nxt = grid_index(nr, nc, width)
            if not (0 <= nr < height and 0 <= nc < width) or nxt in blocked or s in blocked:
                nxt = s
            P[s, a, nxt] = 1.0
    return FiniteMdp(S, A, P, np.zeros((S, A)), gamma)


def bfs_distances(width: int, height: int, obstacles: tuple = ()) -> np.ndarray:
    """All-pairs shortest path lengths on the grid graph (test oracle).

    Entry (s, g) is the minimum number of moves from s to g, or -1 when
    unreachable.
    """
    blocked = {grid_index(r, c, width) for r, c in obstacles}
    S = width * height
    dist = np.full((S, S), -1, dtype=int)
    for start in range(S):
        if start in blocked:
            continue
        dist[start, start] = 0
        queue = deque([start])
        while queue:
            s = queue.popleft()
            r, c = grid_coords(s, width)
            for dr, dc in GRID_MOVES:
                nr, nc = r + dr, c + dc
                if not (0 <= nr < height and 0 <= nc < width):
                    continue
                nxt = grid_index(nr, nc, width)
                if nxt in blocked or dist[start, nxt] >= 0:
                    continue
                dist[start, nxt] = dist[start, s] + 1
                queue.append(nxt)
    return dist


def dyadic_tree(depth: int, gamma: float) -> FiniteMdp:
    """Complete binary tree of the given depth in heap layout (root 0, node i
    has children 2i+1 and 2i+2), 2^(depth+1) - 1 states.

    Action a at an internal node descends to child a; at a leaf both actions
    stay put. At horizon t <= depth every action string reaches a distinct
    state, which makes the per-goal mass of the optimal values grow by
    gamma^t 2^(t-1) per horizon level.
    """
    if depth < 0:
        raise InvalidSpecError("depth must be nonnegative")
    S = 2 ** (depth + 1) - 1
    first_leaf = 2**depth - 1
    P = np.zeros((S, 2, S))
    for s in range(S):
        if s >= first_leaf:
            P[s, 0, s] = 1.0
            P[s, 1, s] = 1.0
        else:
            P[s, 0, 2 * s + 1] = 1.0
            P[s, 1, 2 * s + 2] = 1.0
    return FiniteMdp(S, 2, P, np.zeros((S, 2)), gamma)


def dyadic_mass_profile(depth: int, gamma: float, levels: int) -> np.ndarray:
    """Total mass of the root's optimal goal values by horizon level, without
    materializing the S x A x S tensor.

    Because the two actions lead into disjoint subtrees, the mass of the
    per-state supremum measure obeys f_k(node) = 1 + gamma * (f_{k-1}(left)
    + f_{k-1}(right)) with f_1 = 1 (f_k(leaf) = 1 + gamma * f_{k-1}(leaf)),
    and the root mass at level t is 1 + gamma * f_t(child). Valid for levels
    up to the tree depth; returns masses for t = 0..levels.
    """
    if levels > depth:
        raise ValueError("mass profile is exact only up to the tree depth")
    S = 2 ** (depth + 1) - 1
    first_leaf = 2**depth - 1
    internal = np.arange(first_leaf)
    f = np.zeros(S)  # f_0 = 0 (mass of the zero measure)
    masses = [1.0]  # level 0: the bare unit mass at the root
    for _ in range(levels):
        nxt = np.empty(S)
        nxt[first_leaf:] = 1.0 + gamma * f[first_leaf:]
        nxt[internal] = 1.0 + gamma * (f[2 * internal + 1] + f[2 * internal + 2])
        f = nxt
        masses.append(1.0 + gamma * f[1])
    return np.array(masses)


def build_env(spec: dict):
    """Construct an environment from a spec dict.

    Kinds: {"kind": "torus", "n": 8, "gamma": 0.9},
    {"kind": "random-mrp", "states": 6, "density": 0.4, "seed": 0, "gamma":
    0.9, ...}, {"kind": "gridworld", "width": 5, "height": 5, "obstacles":
    [[r, c], ...], "gamma": 0.9}, {"kind": "dyadic-tree", "depth": 4,
    "gamma": 0.6}. An explicit process dict (with "P") is passed through the
    JSON loaders.
    """
    from .mrp import mdp_from_dict, mrp_from_dict

    if not isinstance(spec, dict):
        raise InvalidSpecError("environment spec must be a dict")
    if "P" in spec:
        return mdp_from_dict(spec) if "actions" in spec else mrp_from_dict(spec)
    kind = spec.get("kind")
    try:
        if kind == "torus":
            return torus(int(spec["n"]), float(spec["gamma"]),
                         spec.get("R"), spec.get("noise"))
        if kind == "random-mrp":
            return random_mrp(
                int(spec["states"]),
                float(spec.get("density", 0.5)),
                int(spec.get("seed", 0)),
                float(spec["gamma"]),
                spec.get("reward", "normal"),
                float(spec.get("noise_std", 0.0)),
            )
        if kind == "gridworld":
            obstacles = tuple(tuple(rc) for rc in spec.get("obstacles", ()))
            return gridworld(int(spec["width"]), int(spec["height"]),
                             obstacles, float(spec.get("gamma", 0.9)))
        if kind == "dyadic-tree":
            return dyadic_tree(int(spec["depth"]), float(spec["gamma"]))
    except KeyError as exc:
        raise InvalidSpecError(f"spec for {kind!r} is missing field {exc}") from exc
    raise InvalidSpecError(f"unknown environment kind {kind!r}")
