"""Sequential occupancy states: sparse posteriors over (state, joint history).

A SOC holds sorted combined keys `history_id * n_states + state` with strictly
positive probabilities. The one-step transition is the exact Bayesian
recursion (measure preserving, never renormalized); expected reward applies
the per-step discount. A brute-force trajectory-enumeration posterior serves
as the independent oracle for the sufficiency property.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .histories import ROOT, HistoryStore
from .seqform import SequentialView

__all__ = [
    "SequentialOccupancyState",
    "DecisionRule",
    "UndefinedDecisionRuleError",
    "initial_soc",
    "soc_step",
    "soc_reward",
    "private_marginal",
    "prune",
    "posterior_oracle",
    "soc_from_oracle_table",
    "dump_soc",
]


class UndefinedDecisionRuleError(KeyError):
    """A decision rule has no action for a private history in the SOC support."""


@dataclass(frozen=True)
class SequentialOccupancyState:
    """Sparse distribution over (sequential state, joint history) at step tau."""

    tau: int
    keys: np.ndarray    # int64, ascending: hist_id * nx + state
    probs: np.ndarray   # float64, > 0
    nx: int

    def __post_init__(self):
        self.keys.setflags(write=False)
        self.probs.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def mass(self) -> float:
        return float(self.probs.sum())

    def hists(self) -> np.ndarray:
        return self.keys // self.nx

    def states(self) -> np.ndarray:
        return self.keys % self.nx

    def entries(self):
        """Iterate (state, history_id, probability), ascending by id pair."""
        for key, p in zip(self.keys, self.probs):
            yield int(key % self.nx), int(key // self.nx), float(p)


SOC = SequentialOccupancyState


@dataclass(frozen=True)
class DecisionRule:
    """One agent's action choice per private history at a single step.

    Deterministic rules carry `actions`; stochastic ones carry `probs` rows
    aligned with `private_ids`. `default_action`, when set, answers lookups
    for unlisted histories (used by solvers to keep incumbent policies total).
    """

    tau: int
    agent: int
    private_ids: np.ndarray          # int64, ascending
    actions: np.ndarray | None = None
    probs: np.ndarray | None = None  # (k, n_actions)
    default_action: int | None = None

    def __post_init__(self):
        if (self.actions is None) == (self.probs is None):
            raise ValueError("exactly one of actions/probs must be given")
        if self.probs is not None:
            rows = np.asarray(self.probs)
            bad = np.nonzero(np.abs(rows.sum(axis=1) - 1.0) > 1e-9)[0]
            if len(bad):
                raise UndefinedDecisionRuleError(
                    f"stochastic rule rows must sum to 1; private history "
                    f"{int(self.private_ids[bad[0]])} sums to {rows[bad[0]].sum()!r}")

    @property
    def is_deterministic(self) -> bool:
        return self.actions is not None

    def _positions(self, pids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.searchsorted(self.private_ids, pids)
        pos_c = np.clip(pos, 0, len(self.private_ids) - 1) if len(self.private_ids) else pos
        found = (len(self.private_ids) > 0) & (
            self.private_ids[pos_c] == pids if len(self.private_ids) else False)
        return pos_c, np.asarray(found)

    def lookup(self, pids: np.ndarray) -> np.ndarray:
        """Deterministic actions for each private id; raises when undefined."""
        pos, found = self._positions(pids)
        if not np.all(found):
            if self.default_action is not None:
                out = np.where(found, self.actions[pos] if len(self.private_ids)
                               else 0, self.default_action)
                return out.astype(np.int64)
            missing = int(np.asarray(pids)[~found][0])
            raise UndefinedDecisionRuleError(
                f"decision rule at step {self.tau} undefined for private history {missing}")
        return self.actions[pos].astype(np.int64)

    def action_weights(self, pids: np.ndarray, n_actions: int) -> np.ndarray:
        """(k, n_actions) action probabilities per private id."""
        pos, found = self._positions(pids)
        if not np.all(found) and self.default_action is None:
            missing = int(np.asarray(pids)[~found][0])
            raise UndefinedDecisionRuleError(
                f"decision rule at step {self.tau} undefined for private history {missing}")
        out = np.zeros((len(pids), n_actions))
        if self.is_deterministic:
            acts = self.actions[pos] if len(self.private_ids) else np.zeros(len(pids), int)
            if self.default_action is not None:
                acts = np.where(found, acts, self.default_action)
            out[np.arange(len(pids)), acts.astype(int)] = 1.0
        else:
            out[found] = self.probs[pos[found]]
            if self.default_action is not None and not np.all(found):
                out[~found, self.default_action] = 1.0
        return out


def rule_on_support(view: SequentialView, store: HistoryStore, s: SOC,
                    action_of, default_action: int | None = None) -> DecisionRule:
    """Deterministic rule on s's private support for the acting agent.

    `action_of` is an action index (constant rule) or a callable taking the
    private history id.
    """
    agent = view.agent_at(s.tau)
    pids, _ = store.private_support(s, agent)
    if callable(action_of):
        acts = np.array([action_of(int(p)) for p in pids], dtype=np.int32)
    else:
        acts = np.full(len(pids), int(action_of), dtype=np.int32)
    return DecisionRule(tau=s.tau, agent=agent, private_ids=pids, actions=acts,
                        default_action=default_action)


def initial_soc(view: SequentialView, store: HistoryStore, b0=None) -> SOC:
    """SOC at step 0: the initial belief attached to the root history."""
    b0 = view.model.b0 if b0 is None else np.asarray(b0, dtype=np.float64)
    xs = np.nonzero(b0 > 0)[0].astype(np.int64)
    keys = np.int64(ROOT) * view.model.n_states + xs
    return SOC(0, keys, b0[xs].copy(), view.model.n_states)


def _expand_ranges(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Concatenate arange(start, start+len) segments without a Python loop."""
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(np.cumsum(lens) - lens, lens)
    return np.arange(total, dtype=np.int64) - offsets + np.repeat(starts, lens)


def _expanded_choices(view, store, s: SOC, a: DecisionRule):
    """Support entries expanded over the rule's positive-probability actions.

    Returns (hists, states, actions, weights); deterministic rules expand to
    the support itself.
    """
    nx = s.nx
    hists = s.hists()
    states = s.states()
    agent = view.agent_at(s.tau)
    pvts = store.proj_view(agent)[hists]
    if a.is_deterministic or a.probs is None:
        us = a.lookup(pvts)
        return hists, states, us, s.probs
    w = a.action_weights(pvts, view.action_count_at(s.tau))
    if np.any(w.sum(axis=1) <= 0):
        bad = int(pvts[np.argmax(w.sum(axis=1) <= 0)])
        raise UndefinedDecisionRuleError(
            f"rule assigns zero probability to every action at private history {bad}")
    ent, act = np.nonzero(w > 0)
    return (hists[ent], states[ent], act.astype(np.int64),
            s.probs[ent] * w[ent, act])


def soc_step(view: SequentialView, store: HistoryStore, s: SOC, a: DecisionRule) -> SOC:
    """Exact Bayesian transition to step tau+1; zero-probability children are
    dropped and no renormalization is performed."""
    if a.tau != s.tau:
        raise ValueError(f"rule at step {a.tau} applied to SOC at step {s.tau}")
    nx = s.nx
    model = view.model
    hists, states, us, w = _expanded_choices(view, store, s, a)
    if not view.is_block_final(s.tau):
        children = store.extend_batch(hists, us, view.empty_obs)
        keys = children * nx + states
        order = np.argsort(keys)
        return SOC(s.tau + 1, keys[order], w[order], nx)
    u_joint = store.pending_view()[hists] + us * view.pending_stride(s.tau)
    rows = states * model.n_joint_actions + u_joint
    starts = model.trans_offsets[rows]
    lens = (model.trans_offsets[rows + 1] - starts).astype(np.int64)
    flat = _expand_ranges(starts, lens)
    src = np.repeat(np.arange(len(rows)), lens)
    ys = model.trans_y[flat].astype(np.int64)
    zs = model.trans_z[flat].astype(np.int64)
    ps = model.trans_p[flat] * w[src]
    children = store.child_block(hists, us)[src] + zs
    keys = children * nx + ys
    ukeys, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=ps)
    keep = sums > 0
    return SOC(s.tau + 1, ukeys[keep], sums[keep], nx)


def soc_reward(view: SequentialView, store: HistoryStore, s: SOC, a: DecisionRule) -> float:
    """Expected discounted immediate reward of applying rule `a` at SOC `s`."""
    if a.tau != s.tau:
        raise ValueError(f"rule at step {a.tau} applied to SOC at step {s.tau}")
    if not view.is_block_final(s.tau):
        _expanded_choices(view, store, s, a)  # still validates rule coverage
        return 0.0
    hists, states, us, w = _expanded_choices(view, store, s, a)
    u_joint = store.pending_view()[hists] + us * view.pending_stride(s.tau)
    return view.discount_at(s.tau) * float(np.dot(w, view.model.reward[states, u_joint]))


def private_marginal(view: SequentialView, store: HistoryStore, s: SOC,
                     agent: int) -> dict[int, float]:
    """Marginal over one agent's private histories; values sum to s.mass."""
    pids, masses = store.private_support(s, agent)
    return {int(p): float(m) for p, m in zip(pids, masses)}


def prune(s: SOC, threshold: float) -> SOC:
    """Drop entries below `threshold` and renormalize; 0 is the identity.

    Degenerate thresholds that would empty the SOC keep the single largest
    entry with mass 1.
    """
    if threshold < 0:
        raise ValueError("prune threshold must be nonnegative")
    if threshold == 0.0:
        return s
    keep = s.probs >= threshold
    if not np.any(keep):
        top = int(np.argmax(s.probs))
        return SOC(s.tau, s.keys[top:top + 1].copy(), np.array([1.0]), s.nx)
    kept = s.probs[keep]
    return SOC(s.tau, s.keys[keep].copy(), kept / kept.sum(), s.nx)


# ---------------------------------------------------------------------------
# Independent posterior oracle (trajectory enumeration)
# ---------------------------------------------------------------------------

RuleFn = Callable[[tuple], "int | Mapping[int, float]"]


def posterior_oracle(view: SequentialView, b0, rule_fns: Sequence[RuleFn],
                     guard: int = 10_000_000) -> dict[tuple[int, tuple], float]:
    """Posterior over (state, joint history) after the given rules, computed by
    direct chain-rule enumeration of complete trajectories.

    `rule_fns[tau]` maps the acting agent's private history -- a tuple of
    (action | None, observation | None) pairs, one per elapsed step -- to an
    action index or a {action: probability} mapping. Returns a dict keyed by
    (state, joint-history tuple) where the joint history is a tuple of
    (action, joint observation | None) pairs. Raises when the enumeration
    exceeds `guard` trajectory branches.
    """
    model = view.model
    b0 = model.b0 if b0 is None else np.asarray(b0, dtype=np.float64)
    n = model.n_agents
    # frontier entries: (state, joint tuple, per-agent private tuples) -> prob
    frontier: dict[tuple, float] = {
        (int(x), (), ((),) * n): float(b0[x]) for x in np.nonzero(b0 > 0)[0]
    }
    expanded = 0
    for tau, rule in enumerate(rule_fns):
        agent = view.agent_at(tau)
        final = view.is_block_final(tau)
        nxt: dict[tuple, float] = {}
        for (x, joint, privates), prob in frontier.items():
            choice = rule(privates[agent])
            dist = {int(choice): 1.0} if np.isscalar(choice) or isinstance(choice, int) \
                else dict(choice)
            for u, pu in dist.items():
                if pu <= 0:
                    continue
                expanded += 1
                if expanded > guard:
                    raise RuntimeError(f"posterior oracle exceeded {guard} branches")
                if not final:
                    key = (x, joint + ((u, None),),
                           tuple(p + ((u, None) if i == agent else (None, None),)
                                 for i, p in enumerate(privates)))
                    nxt[key] = nxt.get(key, 0.0) + prob * pu
                    continue
                pending = [uu for uu, zz in joint[len(joint) - (n - 1):]]
                u_joint = view.assemble_joint_action(pending, u)
                ys, zs, ps = model.row(x, u_joint)
                for y, z, p in zip(ys, zs, ps):
                    expanded += 1
                    if expanded > guard:
                        raise RuntimeError(f"posterior oracle exceeded {guard} branches")
                    key = (int(y), joint + ((u, int(z)),),
                           tuple(p_i + ((u if i == agent else None,
                                         int(model.obs_component(int(z), i))),)
                                 for i, p_i in enumerate(privates)))
                    nxt[key] = nxt.get(key, 0.0) + prob * pu * float(p)
        frontier = nxt
    out: dict[tuple[int, tuple], float] = {}
    for (x, joint, _), prob in frontier.items():
        if prob > 0:
            out[(x, joint)] = out.get((x, joint), 0.0) + prob
    return out


def soc_to_table(view: SequentialView, store: HistoryStore, s: SOC) -> dict:
    """Entries of `s` keyed like the oracle output, for direct comparison."""
    out = {}
    for x, hid, p in s.entries():
        joint = tuple((u, None if z == view.empty_obs else z)
                      for u, z in store.joint_tuple(hid))
        out[(x, joint)] = p
    return out


def soc_from_oracle_table(view: SequentialView, store: HistoryStore,
                          table: Mapping[tuple[int, tuple], float], tau: int) -> SOC:
    """Materialize an oracle posterior as a SOC through the history store."""
    nx = view.model.n_states
    items = []
    for (x, joint), p in table.items():
        hid = ROOT
        for u, z in joint:
            hid = store.extend(hid, u, view.empty_obs if z is None else z)
        items.append((hid * nx + x, p))
    items.sort()
    keys = np.array([k for k, _ in items], dtype=np.int64)
    probs = np.array([p for _, p in items])
    return SOC(tau, keys, probs, nx)


def dump_soc(view: SequentialView, s: SOC) -> str:
    """Debug dump: one `state_id history_id probability` line per entry."""
    lines = [f"{x} {h} {np.format_float_positional(p, unique=True, trim='0')}"
             for x, h, p in s.entries()]
    return "\n".join(lines) + ("\n" if lines else "")
