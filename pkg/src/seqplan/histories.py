"""Interned joint and private history tries for one sequential view.

Histories are dense integer ids into append-only parent-link tables; the same
(parent, action, observation) extension always returns the same id. Children
of one (parent, action) pair are allocated as one contiguous block indexed by
the observation, so batch extension costs one interning lookup per expanded
history rather than per child. Joint nodes cache, per agent, the id of that
agent's private projection and the partially assembled joint action of the
current block, so occupancy code never walks the trie. Single writer;
readers may hold array views.
"""
from __future__ import annotations

import numpy as np

from .seqform import SequentialView

__all__ = ["HistoryStore", "ROOT"]

ROOT = 0
_NO_ACTION = -1


class _KeyMap:
    """int64 -> int64 map with vectorized batch lookup.

    A sorted core array answers most queries via searchsorted; fresh keys sit
    in a dict overlay that is merged into the core once it grows past a
    quarter of the core size.
    """

    __slots__ = ("core_keys", "core_vals", "recent")

    def __init__(self):
        self.core_keys = np.zeros(0, dtype=np.int64)
        self.core_vals = np.zeros(0, dtype=np.int64)
        self.recent: dict[int, int] = {}

    def get_batch(self, keys: np.ndarray, out: np.ndarray) -> list[int]:
        """Fill `out` with values; return positions whose key is unknown."""
        missing = []
        if len(self.core_keys):
            pos = np.searchsorted(self.core_keys, keys)
            pos_c = np.minimum(pos, len(self.core_keys) - 1)
            hit = self.core_keys[pos_c] == keys
            out[hit] = self.core_vals[pos_c[hit]]
            rest = np.nonzero(~hit)[0]
        else:
            rest = np.arange(len(keys))
        if len(rest):
            recent = self.recent
            rest_keys = keys[rest].tolist()
            for j, key in zip(rest.tolist(), rest_keys):
                hit = recent.get(key)
                if hit is None:
                    missing.append(j)
                else:
                    out[j] = hit
        return missing

    def insert(self, keys: np.ndarray, vals: np.ndarray):
        self.recent.update(zip(keys.tolist(), vals.tolist()))
        if len(self.recent) > max(4096, len(self.core_keys) // 4):
            keys_new = np.fromiter(self.recent.keys(), dtype=np.int64,
                                   count=len(self.recent))
            vals_new = np.fromiter(self.recent.values(), dtype=np.int64,
                                   count=len(self.recent))
            merged_k = np.concatenate([self.core_keys, keys_new])
            merged_v = np.concatenate([self.core_vals, vals_new])
            order = np.argsort(merged_k, kind="stable")
            self.core_keys = merged_k[order]
            self.core_vals = merged_v[order]
            self.recent = {}


class _Table:
    """Growable parallel arrays for one trie plus block interning."""

    __slots__ = ("parent", "action", "obs", "depth", "blocks", "size", "width")

    def __init__(self, width: int, cap: int = 512):
        self.width = width  # children per block: one per observation symbol
        self.parent = np.full(cap, -1, dtype=np.int64)
        self.action = np.full(cap, _NO_ACTION, dtype=np.int32)
        self.obs = np.full(cap, -1, dtype=np.int32)
        self.depth = np.zeros(cap, dtype=np.int32)
        self.blocks = _KeyMap()  # (parent * KU + action+1) -> first child id
        self.size = 1  # id 0 is the root

    def grow(self, need: int):
        cap = len(self.parent)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("parent", "action", "obs", "depth"):
            old = getattr(self, name)
            arr = np.empty(new_cap, dtype=old.dtype)
            arr[: self.size] = old[: self.size]
            setattr(self, name, arr)

    def alloc_blocks(self, parents: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Append `len(parents)` blocks; returns each block's first child id."""
        m = len(parents)
        w = self.width
        base = self.size
        self.grow(base + m * w)
        sl = slice(base, base + m * w)
        self.parent[sl] = np.repeat(parents, w)
        self.action[sl] = np.repeat(actions, w).astype(np.int32)
        self.obs[sl] = np.tile(np.arange(w, dtype=np.int32), m)
        self.depth[sl] = np.repeat(self.depth[parents] + 1, w)
        self.size = base + m * w
        return base + w * np.arange(m, dtype=np.int64)


def _block_bases(table: _Table, ku: int, parents: np.ndarray, actions: np.ndarray):
    """Vectorized block lookup; returns (bases aligned with inputs, new blocks)."""
    keys = parents * ku + (actions + 1)
    ukeys, inverse = np.unique(keys, return_inverse=True)
    bases = np.empty(len(ukeys), dtype=np.int64)
    missing = table.blocks.get_batch(ukeys, bases)
    new_first = None
    if missing:
        first = np.empty(len(ukeys), dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(inverse) - 1, -1, -1)
        src = first[missing]
        new_bases = table.alloc_blocks(parents[src], actions[src])
        table.blocks.insert(ukeys[missing], new_bases)
        bases[missing] = new_bases
        new_first = (new_bases, parents[src], actions[src])
    return bases[inverse], new_first


class HistoryStore:
    """Joint/private history interning for occupancy-state machinery."""

    def __init__(self, view: SequentialView):
        self.view = view
        model = view.model
        n = model.n_agents
        self._n = n
        wj = model.n_joint_obs + 1  # last slot is the empty symbol
        self._joint = _Table(wj)
        self._private = [_Table(model.obs_counts[i] + 1) for i in range(n)]
        self._proj = np.zeros((n, 512 * 1), dtype=np.int64)
        self._pending = np.zeros(512, dtype=np.int64)
        self._ku = max(model.action_counts) + 2
        self._empty_joint = view.empty_obs
        # joint observation symbol -> per-agent private observation symbol
        self._zi_pattern = []
        for i in range(n):
            pattern = (np.arange(wj, dtype=np.int64) // model.obs_strides[i]) \
                % model.obs_counts[i]
            pattern[wj - 1] = model.obs_counts[i]  # empty maps to agent empty
            self._zi_pattern.append(pattern)
        self._sim_tuple_cache: list[dict[int, tuple]] = [dict() for _ in range(n)]

    # -- introspection ---------------------------------------------------------
    @property
    def n_joint(self) -> int:
        return self._joint.size

    def n_private(self, agent: int) -> int:
        return self._private[agent].size

    def depth(self, joint_id: int) -> int:
        return int(self._joint.depth[joint_id])

    def parent(self, joint_id: int) -> int:
        return int(self._joint.parent[joint_id])

    def proj_view(self, agent: int) -> np.ndarray:
        return self._proj[agent, : self._joint.size]

    def pending_view(self) -> np.ndarray:
        return self._pending[: self._joint.size]

    # -- extension ---------------------------------------------------------------
    def extend(self, joint_id: int, u: int, z: int) -> int:
        """Intern the child (joint_id, u, z); z may be `view.empty_obs`."""
        ids = self.extend_batch(np.array([joint_id], dtype=np.int64),
                                np.array([u], dtype=np.int64),
                                np.array([z], dtype=np.int64))
        return int(ids[0])

    def extend_batch(self, parents: np.ndarray, us, zs) -> np.ndarray:
        """Vectorized extend; parents must share one depth (one sequential step)."""
        parents = np.asarray(parents, dtype=np.int64)
        k = len(parents)
        zs = np.broadcast_to(np.asarray(zs, dtype=np.int64), (k,))
        return self.child_block(parents, us) + zs

    def child_block(self, parents: np.ndarray, us) -> np.ndarray:
        """First-child id per (parent, action); the child for observation z is
        `base + z`. Callers expanding each history over many observations
        should fetch blocks once and add observation offsets themselves."""
        parents = np.asarray(parents, dtype=np.int64)
        us = np.broadcast_to(np.asarray(us, dtype=np.int64), parents.shape)
        bases, new = _block_bases(self._joint, self._ku, parents, us)
        if new is not None:
            self._init_joint_blocks(*new)
        return bases

    def _init_joint_blocks(self, bases: np.ndarray, parents: np.ndarray,
                           actions: np.ndarray):
        """Fill pending codes and private projections for fresh child blocks."""
        jt = self._joint
        w = jt.width
        m = len(bases)
        if jt.size > self._proj.shape[1]:
            cap = max(jt.size, 2 * self._proj.shape[1])
            old = self._proj.shape[1]
            proj = np.empty((self._n, cap), dtype=np.int64)
            proj[:, :old] = self._proj
            self._proj = proj
            pend = np.empty(cap, dtype=np.int64)
            pend[:old] = self._pending
            self._pending = pend
        view = self.view
        tau = int(jt.depth[parents[0]])  # parents share one depth by contract
        agent = view.agent_at(tau)
        slots = (bases[:, None] + np.arange(w, dtype=np.int64)[None, :]).ravel()
        if view.is_block_final(tau):
            self._pending[slots] = 0
        else:
            self._pending[slots] = np.repeat(
                self._pending[parents] + actions * view.pending_stride(tau), w)
        for i in range(self._n):
            a_i = actions if i == agent else np.full(m, _NO_ACTION, dtype=np.int64)
            pparents = self._proj[i, parents]
            pbases, pnew = _block_bases(self._private[i], self._ku, pparents, a_i)
            # private blocks need no extra side tables; alloc filled everything
            del pnew
            pattern = self._zi_pattern[i]
            self._proj[i, slots] = (pbases[:, None] + pattern[None, :]).ravel()

    # -- projections -----------------------------------------------------------
    def private_projection(self, joint_id: int, agent: int) -> int:
        """Interned private history of `agent` inside a joint history."""
        return int(self._proj[agent, joint_id])

    def private_support(self, soc, agent: int):
        """(sorted private ids, their masses) for one agent under a SOC."""
        pvts = self.proj_view(agent)[soc.keys // soc.nx]
        order = np.argsort(pvts, kind="stable")
        sp = pvts[order]
        starts = np.concatenate([[0], np.nonzero(np.diff(sp))[0] + 1])
        masses = np.add.reduceat(soc.probs[order], starts)
        return sp[starts], masses

    # -- decoding ----------------------------------------------------------------
    def joint_tuple(self, joint_id: int) -> tuple:
        """((u, z_joint), ...) along the path from the root; z of empty steps
        is `view.empty_obs`."""
        out = []
        jt = self._joint
        while joint_id != ROOT:
            out.append((int(jt.action[joint_id]), int(jt.obs[joint_id])))
            joint_id = int(jt.parent[joint_id])
        return tuple(reversed(out))

    def private_tuple(self, agent: int, private_id: int) -> tuple:
        """((action | None, z_i | None), ...) per sequential step; None marks
        the empty symbol."""
        out = []
        pt = self._private[agent]
        empty = self.view.model.obs_counts[agent]
        while private_id != ROOT:
            a = int(pt.action[private_id])
            z = int(pt.obs[private_id])
            out.append((None if a == _NO_ACTION else a, z if z != empty else None))
            private_id = int(pt.parent[private_id])
        return tuple(reversed(out))

    def sim_private_tuple(self, agent: int, private_id: int) -> tuple:
        """Simultaneous-form private history ((u, z), ...): empty symbols dropped."""
        cache = self._sim_tuple_cache[agent]
        hit = cache.get(private_id)
        if hit is not None:
            return hit
        acts, obs = [], []
        for a, z in self.private_tuple(agent, private_id):
            if a is not None:
                acts.append(a)
            if z is not None:
                obs.append(z)
        # mid-block the agent has acted for block t but not yet observed z_{t+1}
        result = tuple(zip(acts, obs))
        cache[private_id] = result
        return result
