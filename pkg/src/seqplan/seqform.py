"""Implicit sequential-move view of a simultaneous-move Dec-POMDP.

One simultaneous decision epoch t becomes a block of n sequential steps; the
agent scheduled at step tau is sigma[tau mod n], the per-step discount is
gamma**(t) with t = tau // n, and only the last agent of a block triggers the
base dynamics and reward. Intermediate steps deterministically append the
chosen action to a pending prefix and emit a reserved empty observation for
everyone. Augmented states are never enumerated: a sequential state is a
(base state, pending actions) pair evaluated lazily.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import DecPomdp

__all__ = [
    "SequentialState",
    "SequentialView",
    "sequentialize",
    "seq_step",
    "evaluate_seq_policy",
]


@dataclass(frozen=True)
class SequentialState:
    """Base state plus the actions already chosen within the current block."""
    base_state: int
    pending: tuple[int, ...] = ()


@dataclass(frozen=True)
class SequentialView:
    model: DecPomdp
    sigma: tuple[int, ...]  # agent permutation, 0-based, sigma[k] acts k-th in a block
    horizon: int            # simultaneous-move horizon; the view runs n * horizon steps
    _floor: np.ndarray = field(repr=False, default=None)
    _ceil: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n = self.model.n_agents
        ellp = n * self.horizon
        lam = np.array([self.discount_at(t) for t in range(ellp)])
        final = np.array([self.is_block_final(t) for t in range(ellp)], dtype=bool)
        step_min = np.where(final, lam * float(self.model.reward.min()), 0.0)
        step_max = np.where(final, lam * float(self.model.reward.max()), 0.0)
        floor = np.concatenate([np.cumsum(step_min[::-1])[::-1], [0.0]])
        ceil = np.concatenate([np.cumsum(step_max[::-1])[::-1], [0.0]])
        object.__setattr__(self, "_floor", floor)
        object.__setattr__(self, "_ceil", ceil)

    # -- schedule ------------------------------------------------------------
    @property
    def n_agents(self) -> int:
        return self.model.n_agents

    @property
    def ell_prime(self) -> int:
        return self.n_agents * self.horizon

    def agent_at(self, tau: int) -> int:
        return self.sigma[tau % self.n_agents]

    def discount_at(self, tau: int) -> float:
        return self.model.gamma ** (tau // self.n_agents)

    def action_count_at(self, tau: int) -> int:
        return self.model.action_counts[self.agent_at(tau)]

    def is_block_final(self, tau: int) -> bool:
        return tau % self.n_agents == self.n_agents - 1

    @property
    def empty_obs(self) -> int:
        """Reserved joint index for the empty symbol at intermediate steps."""
        return self.model.n_joint_obs

    def value_floor(self, tau: int) -> float:
        """Worst possible discounted return over steps tau..ell'-1."""
        return float(self._floor[tau])

    def value_ceil(self, tau: int) -> float:
        return float(self._ceil[tau])

    # -- joint action assembly -------------------------------------------------
    def assemble_joint_action(self, pending: Sequence[int], last: int) -> int:
        """Flat joint action from a full block of per-step choices in sigma order."""
        vec = [0] * self.n_agents
        for k, u in enumerate(pending):
            vec[self.sigma[k]] = int(u)
        vec[self.sigma[self.n_agents - 1]] = int(last)
        return self.model.joint_action(vec)

    def pending_stride(self, tau: int) -> int:
        """Contribution stride of the step-tau action inside the flat joint action."""
        return self.model.action_strides[self.agent_at(tau)]


def sequentialize(model: DecPomdp, ordering: Sequence[int] | None = None,
                  horizon: int | None = None) -> SequentialView:
    """Build the sequential-move view of `model` under an agent ordering.

    `ordering` lists 0-based agent indices in the order they act within each
    block (identity by default). The view is immutable and materializes no
    augmented state space.
    """
    n = model.n_agents
    sigma = tuple(range(n)) if ordering is None else tuple(int(i) for i in ordering)
    if sorted(sigma) != list(range(n)):
        raise ValueError(f"ordering {sigma!r} is not a permutation of 0..{n - 1}")
    return SequentialView(model, sigma,
                          model.default_horizon if horizon is None else int(horizon))


def seq_step(view: SequentialView, x: SequentialState, u: int, tau: int):
    """One sequential transition: ([(SequentialState, z_joint), prob, ...], reward).

    Intermediate steps return reward 0 and a single deterministic successor
    carrying the extended pending prefix and the empty observation (reported
    as `view.empty_obs`). The block's last step assembles the joint action,
    pays the base reward, and branches over base-model (y, z) outcomes.
    """
    n = view.n_agents
    if len(x.pending) != tau % n:
        raise ValueError(f"pending length {len(x.pending)} inconsistent with step {tau}")
    if not 0 <= u < view.action_count_at(tau):
        raise ValueError(f"action {u} out of range for agent {view.agent_at(tau)}")
    if not view.is_block_final(tau):
        nxt = SequentialState(x.base_state, x.pending + (int(u),))
        return [((nxt, view.empty_obs), 1.0)], 0.0
    u_joint = view.assemble_joint_action(x.pending, u)
    reward = float(view.model.reward[x.base_state, u_joint])
    ys, zs, ps = view.model.row(x.base_state, u_joint)
    outcomes = [((SequentialState(int(y)), int(z)), float(p))
                for y, z, p in zip(ys, zs, ps)]
    return outcomes, reward


def evaluate_seq_policy(view: SequentialView, rules, b0=None, store=None,
                        prune_eps: float = 0.0) -> float:
    """Exact lambda-discounted value of a sequential policy by SOC chaining.

    `rules` holds one entry per sequential step: a DecisionRule or a provider
    called as provider(view, store, soc) -> DecisionRule. With `prune_eps` > 0
    each chained SOC drops entries below the threshold (renormalized), making
    the result approximate for wide supports.
    """
    from . import occupancy  # runtime import; occupancy builds on this module

    if len(rules) != view.ell_prime:
        raise ValueError(f"need {view.ell_prime} decision rules, got {len(rules)}")
    from .histories import HistoryStore
    if store is None:
        store = HistoryStore(view)
    s = occupancy.initial_soc(view, store, b0)
    total = 0.0
    for tau in range(view.ell_prime):
        rule = rules[tau]
        if callable(rule) and not isinstance(rule, occupancy.DecisionRule):
            rule = rule(view, store, s)
        total += occupancy.soc_reward(view, store, s, rule)
        s = occupancy.soc_step(view, store, s, rule)
        if prune_eps > 0.0:
            s = occupancy.prune(s, prune_eps)
    return total


def sim_policy_rule_provider(sim_policy, agent_of_tau: Callable[[int], int] | None = None):
    """Adapt per-agent simultaneous history->action maps to rule providers.

    `sim_policy[i]` maps tuples of (action, observation) index pairs to action
    indices. The provider resolves each private history in the current SOC
    support back to its simultaneous form (empty symbols dropped) and looks
    the action up there.
    """
    from .occupancy import DecisionRule, UndefinedDecisionRuleError

    def provider(view, store, soc):
        tau = soc.tau
        agent = view.agent_at(tau)
        pids, _ = store.private_support(soc, agent)
        acts = np.empty(len(pids), dtype=np.int32)
        for j, pid in enumerate(pids):
            hist = store.sim_private_tuple(agent, int(pid))
            try:
                acts[j] = sim_policy[agent][hist]
            except KeyError as exc:
                raise UndefinedDecisionRuleError(
                    f"simultaneous policy of agent {agent} undefined at {hist}") from exc
        return DecisionRule(tau=tau, agent=agent, private_ids=pids, actions=acts)

    return provider
