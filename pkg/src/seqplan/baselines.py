"""Ground-truth and comparison solvers.

`exact_solve` exhaustively recurses over deterministic decision rules on each
reached SOC support, memoizing on a structure-canonical form (probabilities
rounded to 1e-12, private histories replaced by first-occurrence ranks) so
that prefix-permuted but equivalent occupancy states collapse. The
simultaneous-move helpers are written against plain dictionaries on purpose:
they are the independent second route for the sequential machinery.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from .histories import HistoryStore
from .maxplane import StateValueLinear, compose_alpha, zero_alpha
from .model import DecPomdp
from .occupancy import DecisionRule, SOC, initial_soc, soc_reward, soc_step
from .osarsa import (SolveResult, SolverConfig, TraceRecord, accept,
                     finite_horizon_vi, heuristic_blind, heuristic_mdp_policy)
from .seqform import SequentialView, evaluate_seq_policy, sequentialize

__all__ = [
    "GuardExceeded",
    "ExactSolveResult",
    "exact_solve",
    "sim_evaluate_policy",
    "sim_bellman_solve",
    "sim_greedy_exhaustive",
    "osarsa_sim_run",
    "IqlConfig",
    "iql_run",
    "mdp_upper_bound",
]


class GuardExceeded(RuntimeError):
    """An enumeration guard was hit before the computation finished."""


@dataclass
class ExactSolveResult:
    value: float
    policy: list[DecisionRule]
    nodes_expanded: int


def _first_occurrence_ranks(arr: np.ndarray) -> np.ndarray:
    seen: dict[int, int] = {}
    out = np.empty(len(arr), dtype=np.int64)
    for j, v in enumerate(arr):
        out[j] = seen.setdefault(int(v), len(seen))
    return out


def _canonical_key(view: SequentialView, store: HistoryStore, s: SOC) -> bytes:
    """Structure-invariant SOC fingerprint: state, mid-block pending actions,
    per-agent private-history sharing pattern, and rounded probabilities."""
    hists = s.hists()
    parts = [np.int64(s.tau).tobytes(), s.states().tobytes(),
             store.pending_view()[hists].tobytes(),
             np.round(s.probs, 12).tobytes()]
    for i in range(view.n_agents):
        parts.append(_first_occurrence_ranks(store.proj_view(i)[hists]).tobytes())
    return b"".join(parts)


def _rank_ordered_pids(store: HistoryStore, s: SOC, agent: int) -> np.ndarray:
    """Acting agent's private ids in first-occurrence (canonical) order."""
    pvts = store.proj_view(agent)[s.hists()]
    seen: dict[int, None] = {}
    for v in pvts:
        seen.setdefault(int(v))
    return np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))


def _rule_from_rank_actions(view, s, agent, pids_by_rank, actions) -> DecisionRule:
    order = np.argsort(pids_by_rank)
    return DecisionRule(tau=s.tau, agent=agent,
                        private_ids=pids_by_rank[order],
                        actions=np.asarray(actions, dtype=np.int32)[order])


def exact_solve(view: SequentialView, guard: int = 2_000_000,
                store: HistoryStore | None = None) -> ExactSolveResult:
    """Optimal value and policy by depth-first rule enumeration with memoization.

    Raises GuardExceeded once more than `guard` candidate rules have been
    expanded. The returned policy is the rule sequence along the optimal
    chain, total on the supports that chain generates.
    """
    store = HistoryStore(view) if store is None else store
    memo: dict[bytes, tuple[float, tuple[int, ...]]] = {}
    nodes = 0

    def solve(s: SOC) -> float:
        nonlocal nodes
        if s.tau == view.ell_prime:
            return 0.0
        key = _canonical_key(view, store, s)
        hit = memo.get(key)
        if hit is not None:
            return hit[0]
        agent = view.agent_at(s.tau)
        pids = _rank_ordered_pids(store, s, agent)
        n_u = view.action_count_at(s.tau)
        best, best_actions = -np.inf, None
        for cand in product(range(n_u), repeat=len(pids)):
            nodes += 1
            if nodes > guard:
                raise GuardExceeded(
                    f"exact solve expanded more than {guard} decision rules")
            rule = _rule_from_rank_actions(view, s, agent, pids, cand)
            v = soc_reward(view, store, s, rule) + solve(soc_step(view, store, s, rule))
            if v > best:
                best, best_actions = v, cand
        memo[key] = (best, best_actions)
        return best

    s0 = initial_soc(view, store)
    value = solve(s0)
    policy: list[DecisionRule] = []
    s = s0
    for _ in range(view.ell_prime):
        _, actions = memo[_canonical_key(view, store, s)]
        agent = view.agent_at(s.tau)
        rule = _rule_from_rank_actions(view, s, agent,
                                       _rank_ordered_pids(store, s, agent), actions)
        policy.append(rule)
        s = soc_step(view, store, s, rule)
    return ExactSolveResult(value=value, policy=policy, nodes_expanded=nodes)


# ---------------------------------------------------------------------------
# Independent simultaneous-move machinery (dict-based; oracle route)
# ---------------------------------------------------------------------------

def _sim_frontier_step(model: DecPomdp, occ: dict, actions_of, t: int, gamma: float):
    """One simultaneous step of dict occupancy; returns (reward, next occ)."""
    n = model.n_agents
    reward = 0.0
    nxt: dict = {}
    for (x, privs), p in occ.items():
        u_vec = actions_of(privs)
        u = model.joint_action(u_vec)
        reward += (gamma ** t) * p * float(model.reward[x, u])
        ys, zs, ps = model.row(x, u)
        for y, z, pp in zip(ys, zs, ps):
            key = (int(y), tuple(privs[i] + ((u_vec[i], int(model.obs_component(int(z), i))),)
                                 for i in range(n)))
            nxt[key] = nxt.get(key, 0.0) + p * float(pp)
    return reward, nxt


def sim_evaluate_policy(model: DecPomdp, policy: Sequence[Mapping[tuple, int]],
                        horizon: int | None = None,
                        gamma: float | None = None) -> float:
    """Exact expected return of per-agent history->action maps, computed by
    exhaustive forward expansion of the simultaneous occupancy dictionary."""
    horizon = model.default_horizon if horizon is None else horizon
    gamma = model.gamma if gamma is None else gamma
    occ = {(int(x), ((),) * model.n_agents): float(model.b0[x])
           for x in np.nonzero(model.b0 > 0)[0]}
    total = 0.0
    for t in range(horizon):
        def actions_of(privs):
            return tuple(int(policy[i][privs[i]]) for i in range(model.n_agents))
        reward, occ = _sim_frontier_step(model, occ, actions_of, t, gamma)
        total += reward
    return total


def sim_bellman_solve(model: DecPomdp, horizon: int, gamma: float | None = None,
                      guard: int = 2_000_000) -> float:
    """Optimal simultaneous-move value by exhaustive enumeration of joint
    decision rules over reached occupancy dictionaries (no rank canonicalization;
    plain memo on the literal occupancy)."""
    gamma = model.gamma if gamma is None else gamma
    n = model.n_agents
    counts = model.action_counts
    nodes = 0
    memo: dict = {}

    def solve(occ: dict, t: int) -> float:
        nonlocal nodes
        if t == horizon:
            return 0.0
        key = (t, tuple(sorted((x, privs, round(p, 12)) for (x, privs), p in occ.items())))
        if key in memo:
            return memo[key]
        supports = [sorted({privs[i] for (_, privs) in occ}) for i in range(n)]
        best = -np.inf
        agent_rules = [list(product(range(counts[i]), repeat=len(supports[i])))
                       for i in range(n)]
        for joint in product(*agent_rules):
            nodes += 1
            if nodes > guard:
                raise GuardExceeded(f"simultaneous Bellman exceeded {guard} rules")
            tables = [dict(zip(supports[i], joint[i])) for i in range(n)]

            def actions_of(privs):
                return tuple(tables[i][privs[i]] for i in range(n))
            reward, nxt = _sim_frontier_step(model, occ, actions_of, t, gamma)
            best = max(best, reward + solve(nxt, t + 1))
        memo[key] = best
        return best

    occ0 = {(int(x), ((),) * n): float(model.b0[x])
            for x in np.nonzero(model.b0 > 0)[0]}
    return solve(occ0, 0)


# ---------------------------------------------------------------------------
# Simultaneous-move oSARSA (exhaustive greedy; no MILP)
# ---------------------------------------------------------------------------

def _walk_private_parents(store: HistoryStore, agent: int, pids: np.ndarray,
                          steps: int) -> np.ndarray:
    pt = store._private[agent]
    out = pids
    for _ in range(steps):
        out = pt.parent[out]
    return out.astype(np.int64)


def sim_greedy_exhaustive(view: SequentialView, store: HistoryStore, s: SOC,
                          alpha_next: StateValueLinear, guard: int = 200_000):
    """Exhaustively score every joint decision rule on a block-boundary SOC.

    Builds the block action-value table beta(x, o, u_joint) once, reduces it
    to per-joint-history contributions, then enumerates all products of
    per-agent private-history action assignments (first listed history most
    significant). Returns (per-agent action tables, value, candidate count);
    raises GuardExceeded when the candidate count passes `guard`.
    """
    n = view.n_agents
    if s.tau % n != 0:
        raise ValueError("simultaneous greedy expects a block-boundary SOC")
    model = view.model
    nx = s.nx
    hists = s.hists()
    states = s.states()
    nU = model.n_joint_actions
    lam = view.discount_at(s.tau)

    pids_per_agent = []
    counts = []
    for i in range(n):
        pv = store.proj_view(i)[hists]
        pids = np.unique(pv)
        pids_per_agent.append(pids)
        counts.append(model.action_counts[i] ** len(pids))
    n_cand = int(np.prod([float(c) for c in counts]))
    if n_cand > guard or np.prod([float(c) for c in counts]) > guard:
        raise GuardExceeded(
            f"{n_cand} joint decision rules exceed the guard of {guard}")

    # block beta: chain the n sequential sub-steps under each joint action
    uh, uh_inv = np.unique(hists, return_inverse=True)
    contrib = np.zeros((len(uh), nU))
    for u in range(nU):
        vec = model.action_vector(u)
        children = uh
        for k in range(n - 1):
            children = store.extend_batch(
                children, np.full(len(uh), vec[view.sigma[k]], dtype=np.int64),
                view.empty_obs)
        child_of_entry = children[uh_inv]
        rows = states * nU + u
        starts = model.trans_offsets[rows]
        lens = (model.trans_offsets[rows + 1] - starts).astype(np.int64)
        total = int(lens.sum())
        flat = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(lens) - lens, lens) \
            + np.repeat(starts, lens)
        src = np.repeat(np.arange(s.size), lens)
        last = view.sigma[n - 1]
        gchildren = store.child_block(child_of_entry,
                                      vec[last])[src] + model.trans_z[flat]
        cont = model.trans_p[flat] * alpha_next.get(
            gchildren * nx + model.trans_y[flat].astype(np.int64))
        beta_u = lam * model.reward[states, u] + np.bincount(src, weights=cont,
                                                             minlength=s.size)
        np.add.at(contrib[:, u], uh_inv, s.probs * beta_u)

    # per-joint-history private positions
    pos = np.stack([np.searchsorted(pids_per_agent[i], store.proj_view(i)[uh])
                    for i in range(n)], axis=0)  # (n, H)
    strides = model.action_strides
    cand_strides = np.concatenate([np.cumprod([1] + counts[1:][::-1])[::-1]]) \
        if n > 1 else np.array([1])

    best_value, best_idx = -np.inf, 0
    chunk = max(1, min(n_cand, 4096))
    H = len(uh)
    for start in range(0, n_cand, chunk):
        idx = np.arange(start, min(start + chunk, n_cand), dtype=np.int64)
        u_joint = np.zeros((len(idx), H), dtype=np.int64)
        for i in range(n):
            c_i = (idx // cand_strides[i]) % counts[i]
            h_i = len(pids_per_agent[i])
            base = model.action_counts[i]
            # first private history is the most significant digit
            digit_pow = base ** (h_i - 1 - pos[i])
            acts = (c_i[:, None] // digit_pow[None, :]) % base
            u_joint += acts * strides[i]
        scores = contrib[np.arange(H)[None, :], u_joint].sum(axis=1)
        j = int(np.argmax(scores))
        if scores[j] > best_value:
            best_value = float(scores[j])
            best_idx = int(idx[j])

    actions_per_agent = []
    for i in range(n):
        c_i = (best_idx // int(cand_strides[i])) % counts[i]
        h_i = len(pids_per_agent[i])
        base = model.action_counts[i]
        acts = np.array([(c_i // base ** (h_i - 1 - k)) % base for k in range(h_i)],
                        dtype=np.int32)
        actions_per_agent.append((pids_per_agent[i], acts))
    return actions_per_agent, best_value, n_cand


def apply_block_rules(view: SequentialView, store: HistoryStore, s: SOC,
                      tables: Sequence[tuple[np.ndarray, np.ndarray]],
                      default_actions: Sequence[int] | None = None):
    """Chain one simultaneous block from per-agent (block-start pids, actions).

    Returns (per-step DecisionRules, SOC after the block, block reward).
    Sub-step rules look actions up at the block-start projection reached by
    walking private parents back to the boundary.
    """
    n = view.n_agents
    rules = []
    reward = 0.0
    cur = s
    for k in range(n):
        agent = view.agent_at(cur.tau)
        pids_now, _ = store.private_support(cur, agent)
        back = _walk_private_parents(store, agent, pids_now, k)
        start_pids, start_acts = tables[agent]
        pos = np.searchsorted(start_pids, back)
        pos = np.clip(pos, 0, max(0, len(start_pids) - 1))
        ok = len(start_pids) > 0 and np.all(start_pids[pos] == back)
        if not ok and default_actions is None:
            raise KeyError("block rule undefined at a reached private history")
        acts = start_acts[pos] if len(start_pids) else np.zeros(len(pids_now), np.int32)
        if default_actions is not None and len(start_pids):
            hit = start_pids[pos] == back
            acts = np.where(hit, acts, default_actions[agent]).astype(np.int32)
        elif default_actions is not None and not len(start_pids):
            acts = np.full(len(pids_now), default_actions[agent], dtype=np.int32)
        rule = DecisionRule(tau=cur.tau, agent=agent, private_ids=pids_now,
                            actions=acts,
                            default_action=None if default_actions is None
                            else int(default_actions[agent]))
        reward += soc_reward(view, store, cur, rule)
        cur = soc_step(view, store, cur, rule)
        rules.append(rule)
    return rules, cur, reward


def osarsa_sim_run(model: DecPomdp, cfg: SolverConfig, guard: int = 200_000,
                   algorithm: str = "osarsa-sim") -> SolveResult:
    """Simultaneous-move oSARSA with exhaustive joint-rule greedy selection.

    Identical acceptance and portfolio machinery to the sequential solver but
    decisions are whole joint decision rules per block; value functions live
    at block boundaries. When the per-block candidate count passes `guard`
    the run stops with status "oot" (the enumeration is the deliberate
    replacement for the MILP selection).
    """
    horizon = cfg.horizon if cfg.horizon is not None else model.default_horizon
    if cfg.gamma is not None and cfg.gamma != model.gamma:
        model = replace(model, gamma=cfg.gamma)
    view = sequentialize(model, ordering=cfg.ordering, horizon=horizon)
    rng = np.random.default_rng(cfg.seed)
    store = HistoryStore(view)
    n = view.n_agents
    blind_actions, _ = heuristic_blind(model, horizon, model.gamma)
    _, vi_greedy = finite_horizon_vi(model, horizon, model.gamma)

    incumbent_tables: list[list[tuple[np.ndarray, np.ndarray]]] = [
        [(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int32))
         for _ in range(n)] for _ in range(horizon)
    ]
    alphas: list[StateValueLinear] = [zero_alpha(n * t) for t in range(horizon + 1)]
    g = np.full(horizon + 1, -np.inf)
    best_value, best_policy = -np.inf, None
    incumbent_value = None
    trace: list[TraceRecord] = []
    t0 = time.perf_counter()
    status = "ok"
    episode = 0
    while episode < cfg.episodes:
        if cfg.time_limit is not None and time.perf_counter() - t0 >= cfg.time_limit:
            break
        eps = cfg.epsilon0 * (1.0 - episode / (cfg.episodes - 1)) \
            if cfg.episodes > 1 else 0.0
        s = initial_soc(view, store)
        socs = [s]
        t_accept = 0
        changed = False
        try:
            for t in range(horizon):
                if eps < rng.random():
                    tables_list, _, _ = sim_greedy_exhaustive(
                        view, store, s, alphas[t + 1], guard=guard)
                    cand = {i: tables_list[i] for i in range(n)}
                else:
                    k = int(rng.choice(3, p=np.asarray(cfg.portfolio_weights)))
                    if k == 1:
                        marg = np.bincount(s.states(), weights=s.probs,
                                           minlength=model.n_states)
                        mdp_vec = model.action_vector(
                            int(vi_greedy[min(t, horizon - 1), int(np.argmax(marg))]))
                    cand = {}
                    for i in range(n):
                        pids = np.unique(store.proj_view(i)[s.hists()])
                        if k == 0:
                            acts = rng.integers(model.action_counts[i],
                                                size=len(pids)).astype(np.int32)
                        elif k == 1:
                            acts = np.full(len(pids), mdp_vec[i], dtype=np.int32)
                        else:
                            acts = np.full(len(pids), blind_actions[i], dtype=np.int32)
                        cand[i] = (pids, acts)
                rules, s_next, _ = apply_block_rules(
                    view, store, s, [cand[i] for i in range(n)],
                    default_actions=blind_actions)
                g_tilde = alphas[t + 1].dot(s_next)
                if accept(float(g[t + 1]), g_tilde, eps, cfg.temperature_coeff, rng):
                    incumbent_tables[t] = [cand[i] for i in range(n)]
                    g[t + 1] = g_tilde
                    t_accept = t
                    changed = True
                s = s_next
                socs.append(s)
        except GuardExceeded:
            status = "oot"
            break
        for t in range(t_accept, -1, -1):
            alpha = alphas[t + 1]
            sub_rules, _, _ = apply_block_rules(view, store, socs[t],
                                                incumbent_tables[t],
                                                default_actions=blind_actions)
            chain = [socs[t]]
            for rule in sub_rules[:-1]:
                chain.append(soc_step(view, store, chain[-1], rule))
            for k in range(n - 1, -1, -1):
                alpha = compose_alpha(view, store, chain[k], alpha, sub_rules[k])
            alphas[t] = alpha
        if changed or incumbent_value is None:
            seq_rules = []
            s_eval = initial_soc(view, store)
            value = 0.0
            for t in range(horizon):
                sub_rules, s_eval, r_blk = apply_block_rules(
                    view, store, s_eval, incumbent_tables[t],
                    default_actions=blind_actions)
                seq_rules += sub_rules
                value += r_blk
            incumbent_value = value
            current_policy = seq_rules
        if incumbent_value > best_value:
            best_value = incumbent_value
            best_policy = list(current_policy)
        trace.append(TraceRecord(episode, time.perf_counter() - t0, incumbent_value,
                                 best_value, eps, cfg.temperature_coeff * eps))
        episode += 1
    return SolveResult(algorithm=algorithm, best_value=best_value,
                       best_policy=best_policy, episodes=episode,
                       wall_time=time.perf_counter() - t0, trace=trace, status=status)


# ---------------------------------------------------------------------------
# Independent Q-learning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IqlConfig:
    """Tabular IQL knobs; the published experiments leave these unstated."""

    horizon: int | None = None
    episodes: int = 50_000
    learning_rate: float = 0.1
    epsilon0: float = 1.0
    epsilon_final: float = 0.05
    seed: int = 0
    gamma: float | None = None
    eval_every: int = 2_000
    table_guard: int = 2_000_000
    time_limit: float | None = None


def iql_run(model: DecPomdp, cfg: IqlConfig) -> SolveResult:
    """Per-agent tabular Q-learning over private histories with shared reward.

    Agents act epsilon-greedily on their own tables and observe only their
    private history; the greedy joint policy is evaluated exactly every
    `eval_every` episodes and the best value is tracked.
    """
    horizon = model.default_horizon if cfg.horizon is None else cfg.horizon
    gamma = model.gamma if cfg.gamma is None else cfg.gamma
    if gamma != model.gamma:
        model = replace(model, gamma=gamma)
    rng = np.random.default_rng(cfg.seed)
    n = model.n_agents
    counts = model.action_counts
    q_tables: list[dict[tuple, np.ndarray]] = [dict() for _ in range(n)]
    eval_view = sequentialize(model, horizon=horizon)
    t0 = time.perf_counter()
    trace: list[TraceRecord] = []
    best_value, best_policy = -np.inf, None
    status = "ok"

    def q_row(i: int, hist: tuple) -> np.ndarray:
        row = q_tables[i].get(hist)
        if row is None:
            if sum(len(t) for t in q_tables) >= cfg.table_guard:
                raise GuardExceeded("IQL table guard exceeded")
            row = np.zeros(counts[i])
            q_tables[i][hist] = row
        return row

    def greedy_policy():
        return [_DefaultDict({h: int(np.argmax(row)) for h, row in q_tables[i].items()})
                for i in range(n)]

    def eval_greedy(policy) -> float:
        from .seqform import sim_policy_rule_provider
        providers = [sim_policy_rule_provider(policy)] * eval_view.ell_prime
        return evaluate_seq_policy(eval_view, providers)

    episode = 0
    try:
        while episode < cfg.episodes:
            if cfg.time_limit is not None and time.perf_counter() - t0 >= cfg.time_limit:
                break
            frac = episode / max(1, cfg.episodes - 1)
            eps = cfg.epsilon0 + (cfg.epsilon_final - cfg.epsilon0) * frac
            x = int(rng.choice(model.n_states, p=model.b0))
            hists: list[tuple] = [() for _ in range(n)]
            for t in range(horizon):
                acts = []
                for i in range(n):
                    row = q_row(i, hists[i])
                    if rng.random() < eps:
                        acts.append(int(rng.integers(counts[i])))
                    else:
                        acts.append(int(np.argmax(row)))
                u = model.joint_action(acts)
                r = float(model.reward[x, u])
                ys, zs, ps = model.row(x, u)
                pick = int(rng.choice(len(ps), p=ps / ps.sum()))
                y, z = int(ys[pick]), int(zs[pick])
                for i in range(n):
                    nxt_hist = hists[i] + ((acts[i], int(model.obs_component(z, i))),)
                    target = r
                    if t < horizon - 1:
                        target += gamma * float(np.max(q_row(i, nxt_hist)))
                    row = q_row(i, hists[i])
                    row[acts[i]] += cfg.learning_rate * (target - row[acts[i]])
                    hists[i] = nxt_hist
                x = y
            episode += 1
            if episode % cfg.eval_every == 0 or episode == cfg.episodes:
                policy = greedy_policy()
                v = eval_greedy(policy)
                if v > best_value:
                    best_value = v
                    best_policy = policy
                trace.append(TraceRecord(episode, time.perf_counter() - t0, v,
                                         best_value, eps, 0.0))
    except GuardExceeded:
        status = "guard"
    if best_value == -np.inf:
        best_policy = greedy_policy()
        best_value = eval_greedy(best_policy)
    return SolveResult(algorithm="iql", best_value=best_value, best_policy=best_policy,
                       episodes=episode, wall_time=time.perf_counter() - t0,
                       trace=trace, status=status)


class _DefaultDict(dict):
    """History map that answers unvisited histories with action 0."""

    def __init__(self, base: Mapping):
        super().__init__(base)

    def __missing__(self, key):
        return 0


def mdp_upper_bound(model: DecPomdp, horizon: int | None = None,
                    gamma: float | None = None) -> float:
    """Optimal fully observable joint-MDP value from b0 (a valid upper bound)."""
    horizon = model.default_horizon if horizon is None else horizon
    gamma = model.gamma if gamma is None else gamma
    values, _ = finite_horizon_vi(model, horizon, gamma)
    return float(model.b0 @ values[0])
