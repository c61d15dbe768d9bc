"""Max-plane value functions over sequential occupancy states.

State-value linear functions are sparse vectors over (state, history) pairs
with a scalar default for unlisted pairs; a collection's value at a SOC is
the maximum inner product over members. Action-value functions are built
point-based, only on the support of the SOC being backed up. The greedy
decision rule maximizes per private history of the acting agent, which is
where the polynomial backup cost comes from.

Defaults for composed functions are pessimistic (the worst achievable
remaining return) so that every function in a collection stays a pointwise
lower bound of the value of some feasible continuation policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .histories import HistoryStore
from .occupancy import SOC, DecisionRule
from .seqform import SequentialView

__all__ = [
    "StateValueLinear",
    "ActionValueLinear",
    "MaxPlaneCollection",
    "BackupResult",
    "beta_from_alpha",
    "compose_alpha",
    "greedy_decision_rule",
    "eval_maxplane",
    "point_backup",
    "zero_alpha",
]


@dataclass(frozen=True)
class StateValueLinear:
    """Linear function of SOCs: listed (state, history) values plus a default."""

    tau: int
    keys: np.ndarray     # int64, ascending combined keys (hist * nx + state)
    values: np.ndarray   # float64
    default: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or not np.isfinite(self.default):
            raise ValueError("state-value linear functions must be finite")
        self.keys.setflags(write=False)
        self.values.setflags(write=False)

    def get(self, keys: np.ndarray) -> np.ndarray:
        """Values at combined keys, `default` for unlisted pairs."""
        if len(self.keys) == 0:
            return np.full(len(keys), self.default)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == keys
        return np.where(hit, self.values[pos_c], self.default)

    def dot(self, s: SOC) -> float:
        """Inner product <s, alpha>, off-support mass paying the default."""
        return float(np.dot(s.probs, self.get(s.keys)))


def zero_alpha(tau: int) -> StateValueLinear:
    """The all-zero linear function (the boundary condition at the horizon)."""
    return StateValueLinear(tau, np.zeros(0, dtype=np.int64), np.zeros(0), 0.0)


@dataclass(frozen=True)
class ActionValueLinear:
    """Action-value function materialized on one SOC's support times U(tau)."""

    tau: int
    keys: np.ndarray     # the source SOC's combined keys
    values: np.ndarray   # (support, n_actions)

    def __post_init__(self):
        self.keys.setflags(write=False)
        self.values.setflags(write=False)


def _beta_column(view, store, alpha_next, nx, hists, states, us) -> np.ndarray:
    """beta values for one action choice per entry (us scalar or per-entry)."""
    model = view.model
    k = len(hists)
    us = np.broadcast_to(np.asarray(us, dtype=np.int64), (k,))
    if not view.is_block_final(alpha_next.tau - 1):
        if len(alpha_next.keys) == 0:
            return np.full(k, alpha_next.default)
        children = store.extend_batch(hists, us, view.empty_obs)
        return alpha_next.get(children * nx + states)
    lam = view.discount_at(alpha_next.tau - 1)
    u_joint = store.pending_view()[hists] + us * view.pending_stride(alpha_next.tau - 1)
    base = lam * model.reward[states, u_joint]
    if len(alpha_next.keys) == 0:
        return base + alpha_next.default
    rows = states * model.n_joint_actions + u_joint
    starts = model.trans_offsets[rows]
    lens = (model.trans_offsets[rows + 1] - starts).astype(np.int64)
    total = int(lens.sum())
    flat = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(lens) - lens, lens) \
        + np.repeat(starts, lens)
    src = np.repeat(np.arange(k), lens)
    children = store.child_block(hists, us)[src] + model.trans_z[flat]
    cont = model.trans_p[flat] * alpha_next.get(
        children * nx + model.trans_y[flat].astype(np.int64))
    return base + np.bincount(src, weights=cont, minlength=k)


def beta_from_alpha(view: SequentialView, store: HistoryStore,
                    alpha_next: StateValueLinear, s: SOC) -> ActionValueLinear:
    """beta(x,o,u) = lambda(tau) r_seq(x,u) + E[alpha_next(y, (o,u,z))] on s's support."""
    if alpha_next.tau != s.tau + 1:
        raise ValueError(f"alpha at step {alpha_next.tau} cannot back up a SOC at {s.tau}")
    nx = s.nx
    hists = s.hists()
    states = s.states()
    n_u = view.action_count_at(s.tau)
    vals = np.empty((s.size, n_u))
    for u in range(n_u):
        vals[:, u] = _beta_column(view, store, alpha_next, nx, hists, states, u)
    return ActionValueLinear(s.tau, s.keys, vals)


def compose_alpha(view: SequentialView, store: HistoryStore, s: SOC,
                  alpha_next: StateValueLinear, rule: DecisionRule) -> StateValueLinear:
    """alpha(x,o) = beta(x,o,rule(o^rho)) on s's support, without materializing
    the full beta table (only the rule's action column is evaluated)."""
    agent = view.agent_at(s.tau)
    pvts = store.proj_view(agent)[s.hists()]
    acts = rule.lookup(pvts)
    vals = _beta_column(view, store, alpha_next, s.nx, s.hists(), s.states(), acts)
    return StateValueLinear(s.tau, s.keys, vals, default=view.value_floor(s.tau))


@dataclass(frozen=True)
class GreedyResult:
    rule: DecisionRule
    alpha: StateValueLinear
    value: float


def greedy_decision_rule(view: SequentialView, store: HistoryStore,
                         s: SOC, beta: ActionValueLinear) -> GreedyResult:
    """Best action per private history of the acting agent under `beta`.

    Maximizes sum over (x, o) of s(x,o) * beta(x,o,u) independently within
    each private history (ties to the lowest action index), then composes the
    induced state-value linear function alpha(x,o) = beta(x,o,a(o^rho)) and
    its value <s, alpha>.
    """
    if beta.tau != s.tau or len(beta.keys) != s.size or not np.array_equal(beta.keys, s.keys):
        raise ValueError("beta was built for a different SOC support")
    agent = view.agent_at(s.tau)
    pvts = store.proj_view(agent)[s.hists()]
    order = np.argsort(pvts, kind="stable")
    sp = pvts[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sp))[0] + 1]) if s.size \
        else np.zeros(0, dtype=np.int64)
    weighted = (s.probs[:, None] * beta.values)[order]
    scores = np.add.reduceat(weighted, starts, axis=0) if s.size else \
        np.zeros((0, beta.values.shape[1]))
    choice = np.argmax(scores, axis=1)
    value = float(scores[np.arange(len(choice)), choice].sum())
    group_of = np.cumsum(np.isin(np.arange(s.size), starts)) - 1
    chosen_per_entry = np.empty(s.size, dtype=np.int64)
    chosen_per_entry[order] = choice[group_of]
    alpha_vals = beta.values[np.arange(s.size), chosen_per_entry]
    rule = DecisionRule(tau=s.tau, agent=agent, private_ids=sp[starts].copy(),
                        actions=choice.astype(np.int32), default_action=0)
    alpha = StateValueLinear(s.tau, s.keys, alpha_vals,
                             default=view.value_floor(s.tau))
    return GreedyResult(rule, alpha, value)


@dataclass
class MaxPlaneCollection:
    """Finite set of state-value linear functions sharing one step."""

    tau: int
    members: list[StateValueLinear] = field(default_factory=list)
    rules: list[DecisionRule | None] = field(default_factory=list)

    def add(self, alpha: StateValueLinear, rule: DecisionRule | None = None):
        if alpha.tau != self.tau:
            raise ValueError(f"alpha at step {alpha.tau} added to collection at {self.tau}")
        self.members.append(alpha)
        self.rules.append(rule)

    def __len__(self) -> int:
        return len(self.members)


def eval_maxplane(collection: MaxPlaneCollection, s: SOC) -> tuple[float, int]:
    """(max inner product, witness index); ties resolve to insertion order."""
    if not collection.members:
        raise ValueError("cannot evaluate an empty max-plane collection")
    best, best_i = -np.inf, 0
    for i, alpha in enumerate(collection.members):
        v = alpha.dot(s)
        if v > best:
            best, best_i = v, i
    return best, best_i


@dataclass(frozen=True)
class BackupResult:
    rule: DecisionRule
    alpha: StateValueLinear
    value: float
    member: int  # index of the winning alpha in the next-step collection


def point_backup(view: SequentialView, store: HistoryStore,
                 v_next: MaxPlaneCollection, s: SOC) -> BackupResult:
    """One sequential point backup at SOC `s` from the step-tau+1 collection.

    For each member alpha builds its beta and greedy rule, keeps the best
    (rule, composed alpha) pair. Appending the result to the step-tau
    collection is the caller's decision.
    """
    if not v_next.members:
        raise ValueError("cannot back up from an empty collection")
    if v_next.tau != s.tau + 1:
        raise ValueError(f"collection at step {v_next.tau} cannot back up a SOC at {s.tau}")
    best: GreedyResult | None = None
    best_i = 0
    for i, alpha_next in enumerate(v_next.members):
        beta = beta_from_alpha(view, store, alpha_next, s)
        g = greedy_decision_rule(view, store, s, beta)
        if best is None or g.value > best.value:
            best, best_i = g, i
    return BackupResult(best.rule, best.alpha, best.value, best_i)
