"""Simultaneous-move Dec-POMDP models.

A model couples a hidden Markov chain with per-agent action and observation
sets and a shared reward. Joint dynamics are stored sparsely, one row per
(state, joint action), each row a distribution over (next state, joint
observation) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DecPomdp",
    "UndefinedPolicyError",
    "decode_joint",
    "encode_joint",
    "evaluate_policy_mc",
    "make_multi_gridsmall",
    "make_multi_tiger",
    "validate",
]

PROB_ATOL = 1e-9


def encode_joint(counts: Sequence[int], vector: Sequence[int]) -> int:
    """Flatten a per-agent index vector, agent 1 most significant (row-major)."""
    idx = 0
    for c, v in zip(counts, vector):
        if not 0 <= v < c:
            raise ValueError(f"component {v} out of range [0, {c})")
        idx = idx * c + v
    return idx


def decode_joint(counts: Sequence[int], index: int) -> tuple[int, ...]:
    """Inverse of encode_joint."""
    out = [0] * len(counts)
    for i in range(len(counts) - 1, -1, -1):
        out[i] = index % counts[i]
        index //= counts[i]
    if index:
        raise ValueError("flat index out of range")
    return tuple(out)


def _strides(counts: Sequence[int]) -> tuple[int, ...]:
    s = [1] * len(counts)
    for i in range(len(counts) - 2, -1, -1):
        s[i] = s[i + 1] * counts[i + 1]
    return tuple(s)


@dataclass(frozen=True)
class DecPomdp:
    """An n-agent simultaneous-move Dec-POMDP with initial belief and horizon.

    Joint dynamics rows live in CSR-style arrays: row (x, u) spans
    ``trans_offsets[x * n_joint_actions + u] : trans_offsets[... + 1]`` of
    ``trans_y``/``trans_z``/``trans_p``. Instances are immutable; arrays are
    marked read-only at construction.
    """

    n_agents: int
    state_labels: tuple[str, ...]
    action_labels: tuple[tuple[str, ...], ...]
    obs_labels: tuple[tuple[str, ...], ...]
    gamma: float
    default_horizon: int
    b0: np.ndarray
    reward: np.ndarray  # (n_states, n_joint_actions)
    trans_offsets: np.ndarray
    trans_y: np.ndarray
    trans_z: np.ndarray
    trans_p: np.ndarray
    name: str = "decpomdp"

    def __post_init__(self):
        for arr in (self.b0, self.reward, self.trans_offsets, self.trans_y,
                    self.trans_z, self.trans_p):
            arr.setflags(write=False)

    # -- basic dimensions -------------------------------------------------
    @property
    def n_states(self) -> int:
        return len(self.state_labels)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.action_labels)

    @property
    def obs_counts(self) -> tuple[int, ...]:
        return tuple(len(z) for z in self.obs_labels)

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    @property
    def n_joint_obs(self) -> int:
        return int(np.prod(self.obs_counts))

    @property
    def action_strides(self) -> tuple[int, ...]:
        return _strides(self.action_counts)

    @property
    def obs_strides(self) -> tuple[int, ...]:
        return _strides(self.obs_counts)

    @property
    def max_abs_reward(self) -> float:
        return float(np.max(np.abs(self.reward)))

    # -- joint index helpers ----------------------------------------------
    def joint_action(self, vector: Sequence[int]) -> int:
        return encode_joint(self.action_counts, vector)

    def action_vector(self, index: int) -> tuple[int, ...]:
        return decode_joint(self.action_counts, index)

    def joint_obs(self, vector: Sequence[int]) -> int:
        return encode_joint(self.obs_counts, vector)

    def obs_vector(self, index: int) -> tuple[int, ...]:
        return decode_joint(self.obs_counts, index)

    def obs_component(self, z_joint: np.ndarray | int, agent: int):
        """Agent component of flat joint observation index (vectorized)."""
        stride = self.obs_strides[agent]
        return (z_joint // stride) % self.obs_counts[agent]

    # -- dynamics access ----------------------------------------------------
    def row_slice(self, x: int, u: int) -> slice:
        r = x * self.n_joint_actions + u
        return slice(int(self.trans_offsets[r]), int(self.trans_offsets[r + 1]))

    def row(self, x: int, u: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(next states, joint observations, probabilities) for one (x, u)."""
        sl = self.row_slice(x, u)
        return self.trans_y[sl], self.trans_z[sl], self.trans_p[sl]

    def state_transition_matrix(self) -> np.ndarray:
        """Dense P(y | x, u) with observations marginalized, (X*U, X)."""
        n_rows = self.n_states * self.n_joint_actions
        out = np.zeros((n_rows, self.n_states))
        row_ids = np.repeat(np.arange(n_rows), np.diff(self.trans_offsets))
        np.add.at(out, (row_ids, self.trans_y), self.trans_p)
        return out

    @staticmethod
    def from_rows(
        n_agents: int,
        state_labels: Sequence[str],
        action_labels: Sequence[Sequence[str]],
        obs_labels: Sequence[Sequence[str]],
        gamma: float,
        default_horizon: int,
        b0: np.ndarray,
        reward: np.ndarray,
        rows: Mapping[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]]
        | Callable[[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]],
        name: str = "decpomdp",
    ) -> "DecPomdp":
        """Assemble a model from per-(state, joint action) sparse rows."""
        n_states = len(state_labels)
        n_u = int(np.prod([len(a) for a in action_labels]))
        get = rows.__getitem__ if isinstance(rows, Mapping) else rows
        offsets = np.zeros(n_states * n_u + 1, dtype=np.int64)
        ys, zs, ps = [], [], []
        for x in range(n_states):
            for u in range(n_u):
                y, z, p = get((x, u)) if isinstance(rows, Mapping) else get(x, u)
                keep = np.asarray(p, dtype=np.float64) > 0.0
                ys.append(np.asarray(y, dtype=np.int32)[keep])
                zs.append(np.asarray(z, dtype=np.int32)[keep])
                ps.append(np.asarray(p, dtype=np.float64)[keep])
                offsets[x * n_u + u + 1] = offsets[x * n_u + u] + int(keep.sum())
        return DecPomdp(
            n_agents=n_agents,
            state_labels=tuple(state_labels),
            action_labels=tuple(tuple(a) for a in action_labels),
            obs_labels=tuple(tuple(z) for z in obs_labels),
            gamma=float(gamma),
            default_horizon=int(default_horizon),
            b0=np.asarray(b0, dtype=np.float64),
            reward=np.asarray(reward, dtype=np.float64),
            trans_offsets=offsets,
            trans_y=np.concatenate(ys) if ys else np.zeros(0, np.int32),
            trans_z=np.concatenate(zs) if zs else np.zeros(0, np.int32),
            trans_p=np.concatenate(ps) if ps else np.zeros(0, np.float64),
            name=name,
        )


def validate(model: DecPomdp) -> list[str]:
    """Check type invariants; return one message per violation (empty if none)."""
    v: list[str] = []
    b0sum = float(model.b0.sum())
    if abs(b0sum - 1.0) > PROB_ATOL:
        v.append(f"b0: sums to {b0sum!r}, expected 1")
    if np.any(model.b0 < 0) or np.any(model.b0 > 1):
        bad = int(np.argmax((model.b0 < 0) | (model.b0 > 1)))
        v.append(f"b0[{bad}]: probability {model.b0[bad]!r} outside [0, 1]")
    if not (0.0 <= model.gamma <= 1.0):
        v.append(f"gamma: {model.gamma!r} outside [0, 1]")
    if model.default_horizon < 1:
        v.append(f"default_horizon: {model.default_horizon} not positive")
    if not np.all(np.isfinite(model.reward)):
        x, u = np.unravel_index(int(np.argmax(~np.isfinite(model.reward))), model.reward.shape)
        v.append(f"reward[{x},{u}]: not finite")
    nU = model.n_joint_actions
    row_ids = np.repeat(np.arange(model.n_states * nU), np.diff(model.trans_offsets))
    sums = np.bincount(row_ids, weights=model.trans_p, minlength=model.n_states * nU)
    bad_rows = np.nonzero(np.abs(sums - 1.0) > PROB_ATOL)[0]
    for r in bad_rows[:20]:
        x, u = divmod(int(r), nU)
        v.append(f"transition[x={x},u={u}]: row sums to {sums[r]!r}, expected 1")
    neg = np.nonzero((model.trans_p < 0) | (model.trans_p > 1))[0]
    for i in neg[:20]:
        r = int(np.searchsorted(model.trans_offsets, i, side="right") - 1)
        x, u = divmod(r, nU)
        y, z = int(model.trans_y[i]), int(model.trans_z[i])
        v.append(f"transition[x={x},u={u},y={y},z={z}]: probability {model.trans_p[i]!r} outside [0, 1]")
    return v


# ---------------------------------------------------------------------------
# Built-in generators
# ---------------------------------------------------------------------------

def make_multi_tiger(n: int) -> DecPomdp:
    """n-agent tiger: shared 2-state tiger position, per-agent listen/open.

    Listening yields an independent 0.85-accurate hint per listening agent;
    any door opening resets the tiger uniformly and makes observations
    uninformative. The reward mixes the listening cost, the payoff for good
    doors, and a synchronization-scaled penalty for wrong doors.
    """
    if n < 2:
        raise ValueError("multi-agent tiger needs n >= 2 agents")
    LEFT, RIGHT = 0, 1
    LISTEN, OPEN_L, OPEN_R = 0, 1, 2
    actions = [("listen", "open-left", "open-right")] * n
    obs = [("hear-left", "hear-right")] * n
    n_u = 3**n
    n_z = 2**n

    action_vecs = np.array([decode_joint([3] * n, u) for u in range(n_u)], dtype=np.int64)
    obs_vecs = np.array([decode_joint([2] * n, z) for z in range(n_z)], dtype=np.int64)

    reward = np.zeros((2, n_u))
    for x in (LEFT, RIGHT):
        good = OPEN_R if x == LEFT else OPEN_L
        bad = OPEN_L if x == LEFT else OPEN_R
        n_listen = (action_vecs == LISTEN).sum(axis=1)
        n_good = (action_vecs == good).sum(axis=1)
        n_bad = (action_vecs == bad).sum(axis=1)
        r = -2.0 * n_listen / n + 20.0 * n_good / n
        wrong = n_bad > 0
        c = 1.0 + (n_bad[wrong] - 1) / (n - 1)
        r[wrong] -= 100.0 / c
        reward[x] = r

    # listen observation kernel: per-agent accuracy 0.85 on the (unchanged) state
    hear_p = np.empty((2, n_z))
    for y in (LEFT, RIGHT):
        correct = obs_vecs == y  # hear-left(0) correct iff tiger-left(0)
        hear_p[y] = np.prod(np.where(correct, 0.85, 0.15), axis=1)

    rows = {}
    uniform_z = np.full(n_z, 1.0 / n_z)
    for x in (LEFT, RIGHT):
        for u in range(n_u):
            if np.all(action_vecs[u] == LISTEN):
                y = np.full(n_z, x, dtype=np.int32)
                rows[(x, u)] = (y, np.arange(n_z, dtype=np.int32), hear_p[x])
            else:
                ys = np.repeat(np.array([LEFT, RIGHT], dtype=np.int32), n_z)
                zs = np.tile(np.arange(n_z, dtype=np.int32), 2)
                ps = np.tile(uniform_z * 0.5, 2)
                rows[(x, u)] = (ys, zs, ps)

    return DecPomdp.from_rows(
        n, ("tiger-left", "tiger-right"), actions, obs,
        gamma=1.0, default_horizon=10, b0=np.array([0.5, 0.5]),
        reward=reward, rows=rows, name=f"tiger({n})",
    )


# Per-agent movement deltas on the 2x2 grid: north, south, west, east, stay.
_GRID_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


def _grid_cell_moves(move_success: float,
                     fail_mode: str) -> list[list[list[tuple[int, float]]]]:
    """moves[cell][action] -> [(next_cell, prob)] after wall clamping."""
    def target(cell: int, a: int) -> int:
        r, c = divmod(cell, 2)
        dr, dc = _GRID_DELTAS[a]
        return min(max(r + dr, 0), 1) * 2 + min(max(c + dc, 0), 1)

    out = []
    for cell in range(4):
        per_action = []
        for a in range(5):
            if a == 4:
                per_action.append([(cell, 1.0)])
                continue
            dist: dict[int, float] = {}
            dist[target(cell, a)] = move_success
            rest = 1.0 - move_success
            if fail_mode == "stay":
                fallback = {cell: rest}
            elif fail_mode == "other-dirs":
                others = [o for o in range(4) if o != a]
                fallback = {}
                for o in others:
                    fallback[target(cell, o)] = fallback.get(target(cell, o), 0.0) \
                        + rest / len(others)
            elif fail_mode == "other-actions":
                others = [o for o in range(5) if o != a]
                fallback = {}
                for o in others:
                    t = cell if o == 4 else target(cell, o)
                    fallback[t] = fallback.get(t, 0.0) + rest / len(others)
            elif fail_mode == "opposite":
                fallback = {target(cell, a ^ 1): rest}
            else:
                raise ValueError(f"unknown fail mode {fail_mode!r}")
            for t, p in fallback.items():
                dist[t] = dist.get(t, 0.0) + p
            per_action.append(sorted(dist.items()))
        out.append(per_action)
    return out


def make_multi_gridsmall(n: int, *, _move_success: float = 0.5,
                         _fail_mode: str = "stay",
                         _reward_on_arrival: bool = False) -> DecPomdp:
    """n agents trying to share a cell on a 2x2 grid.

    Moves execute with probability 0.5 and otherwise leave the agent in
    place; `stay` is deterministic, as is bumping a wall. Each agent observes
    the column of its new cell. All agents in one cell pays 1, else 0.
    """
    if n < 2:
        raise ValueError("multi-agent gridsmall needs n >= 2 agents")
    cells = ("nw", "ne", "sw", "se")
    actions = [("north", "south", "west", "east", "stay")] * n
    obs = [("west-col", "east-col")] * n
    n_x, n_u = 4**n, 5**n
    moves = _grid_cell_moves(_move_success, _fail_mode)

    state_vecs = [decode_joint([4] * n, x) for x in range(n_x)]
    action_vecs = [decode_joint([5] * n, u) for u in range(n_u)]
    same_cell = np.array([len(set(sv)) == 1 for sv in state_vecs], dtype=np.float64)

    obs_strideR = _strides([2] * n)
    row_cache: dict[tuple[int, int], tuple] = {}

    def rows(x: int, u: int):
        sv, uv = state_vecs[x], action_vecs[u]
        ys, zs, ps = [], [], []
        stack = [(0, 0, 0, 1.0)]  # (agent, y_partial, z_partial, prob)
        while stack:
            i, ypart, zpart, prob = stack.pop()
            if i == n:
                ys.append(ypart)
                zs.append(zpart)
                ps.append(prob)
                continue
            for ncell, p in moves[sv[i]][uv[i]]:
                stack.append((i + 1, ypart * 4 + ncell,
                              zpart + (ncell % 2) * obs_strideR[i], prob * p))
        out = (np.array(ys, dtype=np.int32), np.array(zs, dtype=np.int32),
               np.array(ps, dtype=np.float64))
        row_cache[(x, u)] = out
        return out

    if _reward_on_arrival:
        reward = np.empty((n_x, n_u))
        for x in range(n_x):
            for u in range(n_u):
                ys, _, ps = rows(x, u)
                reward[x, u] = float(np.dot(ps, same_cell[ys]))
    else:
        reward = np.tile(same_cell[:, None], (1, n_u))

    states = tuple("+".join(cells[c] for c in sv) for sv in state_vecs)
    return DecPomdp.from_rows(
        n, states, actions, obs,
        gamma=1.0, default_horizon=10,
        b0=np.full(n_x, 1.0 / n_x), reward=reward,
        rows=lambda x, u: row_cache.get((x, u)) or rows(x, u),
        name=f"gridsmall({n})",
    )


# ---------------------------------------------------------------------------
# Monte-Carlo policy evaluation
# ---------------------------------------------------------------------------

class UndefinedPolicyError(KeyError):
    """A policy map lacks an entry for a private history that was reached."""


def evaluate_policy_mc(
    model: DecPomdp,
    policy: Sequence[Mapping[tuple, int]],
    episodes: int,
    rng: np.random.Generator,
    horizon: int | None = None,
    gamma: float | None = None,
) -> tuple[float, float]:
    """Estimate a joint policy's expected discounted return by simulation.

    `policy` holds one mapping per agent from private histories -- tuples of
    (action, observation) index pairs, `()` at the root -- to action indices.
    Returns (mean, standard error). Deterministic given the generator state.
    """
    horizon = model.default_horizon if horizon is None else horizon
    gamma = model.gamma if gamma is None else gamma
    if episodes < 1:
        raise ValueError("episodes must be positive")
    n = model.n_agents
    nU = model.n_joint_actions
    strides = model.action_strides

    # Array-backed policy tries, grown on demand: one node per reached history.
    node_action = [[] for _ in range(n)]
    node_child: list[dict[tuple[int, int], int]] = [dict() for _ in range(n)]
    node_hist = [[()] for _ in range(n)]

    def node_act(agent: int, node: int) -> int:
        acts = node_action[agent]
        while len(acts) <= node:
            acts.append(None)
        if acts[node] is None:
            hist = node_hist[agent][node]
            try:
                acts[node] = int(policy[agent][hist])
            except KeyError as exc:
                raise UndefinedPolicyError(
                    f"agent {agent} policy undefined at history {hist}") from exc
        return acts[node]

    def child(agent: int, node: int, u: int, z: int) -> int:
        key = (node, z)  # u is determined by the node's action
        nxt = node_child[agent].get(key)
        if nxt is None:
            nxt = len(node_hist[agent])
            node_hist[agent].append(node_hist[agent][node] + ((u, z),))
            node_child[agent][key] = nxt
        return nxt

    returns = np.zeros(episodes)
    states = rng.choice(model.n_states, size=episodes, p=model.b0)
    nodes = np.zeros((n, episodes), dtype=np.int64)

    for t in range(horizon):
        # group episodes by joint policy node so action lookup is per group
        joint_nodes = nodes[0].copy()
        for i in range(1, n):
            joint_nodes = joint_nodes * (2**20) + nodes[i]
        order = np.argsort(joint_nodes, kind="stable")
        bounds = np.nonzero(np.diff(joint_nodes[order]))[0] + 1
        groups = np.split(order, bounds)
        disc = gamma**t
        for g in groups:
            e0 = int(g[0])
            u_joint = 0
            acts = []
            for i in range(n):
                a = node_act(i, int(nodes[i, e0]))
                acts.append(a)
                u_joint += a * strides[i]
            # vectorized sampling of (y, z) over the group's states
            xs = states[g]
            r_here = model.reward[xs, u_joint]
            returns[g] += disc * r_here
            row_ids = xs * nU + u_joint
            starts = model.trans_offsets[row_ids]
            lens = model.trans_offsets[row_ids + 1] - starts
            maxlen = int(lens.max())
            pad = np.zeros((len(g), maxlen))
            col = np.arange(maxlen)
            mask = col[None, :] < lens[:, None]
            pad[mask] = model.trans_p[(starts[:, None] + col[None, :])[mask]]
            cum = np.cumsum(pad, axis=1)
            draw = rng.random(len(g)) * cum[:, -1]
            pick = (draw[:, None] >= cum).sum(axis=1)
            flat = starts + pick
            states[g] = model.trans_y[flat]
            z_joint = model.trans_z[flat]
            if t < horizon - 1:
                for i in range(n):
                    z_i = model.obs_component(z_joint, i)
                    for zv in np.unique(z_i):
                        sel = g[z_i == zv]
                        nodes[i, sel] = child(i, int(nodes[i, e0]), acts[i], int(zv))
    mean = float(returns.mean())
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return mean, stderr
