"""Sequential-move oSARSA: point-based SARSA over sequential occupancy states.

Each episode rolls one SOC trajectory forward under portfolio epsilon-greedy
selection, splices accepted decision rules into the incumbent policy via a
simulated-annealing test, then refreshes one state-value linear function per
step backward along the visited chain (learning-rate-1 replacement). The
reported best value is a running maximum of exact incumbent evaluations, so
the trace is nondecreasing regardless of what the annealer accepts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .histories import HistoryStore
from .maxplane import (MaxPlaneCollection, StateValueLinear, compose_alpha,
                       point_backup, zero_alpha)
from .model import DecPomdp
from .occupancy import (SOC, DecisionRule, initial_soc, prune, rule_on_support,
                        soc_step)
from .seqform import SequentialView, evaluate_seq_policy, sequentialize

__all__ = [
    "SolverConfig",
    "SolveResult",
    "TraceRecord",
    "accept",
    "select_epsilon_greedy",
    "run",
    "heuristic_blind",
    "heuristic_mdp_policy",
    "finite_horizon_vi",
]

PORTFOLIO = ("random", "mdp", "blind")


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the episode loop; defaults follow the published setup
    (epsilon starts at 0.5, portfolio weights (0.5, 0.25, 0.25), temperature
    coefficient 4)."""

    horizon: int | None = None
    episodes: int = 2000
    time_limit: float | None = None   # seconds; None = episode budget only
    epsilon0: float = 0.5
    portfolio_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    temperature_coeff: float = 4.0
    seed: int = 0
    prune_eps: float = 0.0
    ordering: tuple[int, ...] | None = None
    gamma: float | None = None

    def __post_init__(self):
        if abs(sum(self.portfolio_weights) - 1.0) > 1e-9:
            raise ValueError("portfolio weights must sum to 1")
        if self.temperature_coeff <= 0:
            raise ValueError("temperature coefficient must be positive")
        if not 0.0 <= self.epsilon0 <= 1.0:
            raise ValueError("epsilon0 must lie in [0, 1]")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time budget must be positive")
        if self.episodes < 1:
            raise ValueError("episode budget must be positive")


@dataclass(frozen=True)
class TraceRecord:
    episode: int
    wall_time: float
    evaluated_return: float
    best_value: float
    epsilon: float
    temperature: float


@dataclass
class SolveResult:
    algorithm: str
    best_value: float
    best_policy: list[DecisionRule] | None
    episodes: int
    wall_time: float
    trace: list[TraceRecord] = field(default_factory=list)
    status: str = "ok"  # "ok" | "oot" | "guard"


# ---------------------------------------------------------------------------
# Heuristic policies (the exploration portfolio)
# ---------------------------------------------------------------------------

def finite_horizon_vi(model: DecPomdp, horizon: int, gamma: float):
    """Value iteration on the fully observable joint MDP.

    Returns (values, greedy): values[t] is V_t over states for t = 0..horizon,
    greedy[t] the maximizing joint action per state (ties to lowest index).
    """
    nX, nU = model.n_states, model.n_joint_actions
    row_ids = np.repeat(np.arange(nX * nU), np.diff(model.trans_offsets))
    values = np.zeros((horizon + 1, nX))
    greedy = np.zeros((horizon, nX), dtype=np.int64)
    for t in range(horizon - 1, -1, -1):
        cont = np.bincount(row_ids, weights=model.trans_p * values[t + 1][model.trans_y],
                           minlength=nX * nU).reshape(nX, nU)
        q = model.reward + gamma * cont
        values[t] = q.max(axis=1)
        greedy[t] = q.argmax(axis=1)
    return values, greedy


def heuristic_mdp_policy(model: DecPomdp, horizon: int | None = None,
                         gamma: float | None = None) -> Callable:
    """Rule provider: at a SOC, play the acting agent's component of the
    MDP-greedy joint action at the SOC's most likely state."""
    horizon = model.default_horizon if horizon is None else horizon
    gamma = model.gamma if gamma is None else gamma
    _, greedy = finite_horizon_vi(model, horizon, gamma)

    def provider(view: SequentialView, store: HistoryStore, s: SOC) -> DecisionRule:
        marg = np.bincount(s.states(), weights=s.probs, minlength=model.n_states)
        x_hat = int(np.argmax(marg))
        t = min(s.tau // view.n_agents, horizon - 1)
        agent = view.agent_at(s.tau)
        u = model.action_vector(int(greedy[t, x_hat]))[agent]
        return rule_on_support(view, store, s, u, default_action=u)

    return provider


def heuristic_blind(model: DecPomdp, horizon: int | None = None,
                    gamma: float | None = None) -> tuple[tuple[int, ...], float]:
    """Best constant joint action repeated over the horizon from b0.

    Returns (per-agent actions of the best constant joint action, its value).
    """
    horizon = model.default_horizon if horizon is None else horizon
    gamma = model.gamma if gamma is None else gamma
    nX, nU = model.n_states, model.n_joint_actions
    best_u, best_v = 0, -np.inf
    for u in range(nU):
        p_u = np.zeros((nX, nX))
        for x in range(nX):
            ys, _, ps = model.row(x, u)
            np.add.at(p_u[x], ys, ps)
        b = model.b0.copy()
        value, disc = 0.0, 1.0
        for _ in range(horizon):
            value += disc * float(b @ model.reward[:, u])
            b = b @ p_u
            disc *= gamma
        if value > best_v:
            best_u, best_v = u, value
    return model.action_vector(best_u), best_v


def blind_rule_provider(blind_actions: Sequence[int]) -> Callable:
    def provider(view: SequentialView, store: HistoryStore, s: SOC) -> DecisionRule:
        u = blind_actions[view.agent_at(s.tau)]
        return rule_on_support(view, store, s, u, default_action=u)

    return provider


def random_rule_provider(rng: np.random.Generator) -> Callable:
    """Uniformly draws one deterministic action per private history in support."""
    def provider(view: SequentialView, store: HistoryStore, s: SOC) -> DecisionRule:
        n_u = view.action_count_at(s.tau)
        agent = view.agent_at(s.tau)
        pids, _ = store.private_support(s, agent)
        acts = rng.integers(n_u, size=len(pids)).astype(np.int32)
        return DecisionRule(tau=s.tau, agent=agent, private_ids=pids, actions=acts,
                            default_action=0)

    return provider


# ---------------------------------------------------------------------------
# Algorithm pieces
# ---------------------------------------------------------------------------

def accept(g_best: float, g_new: float, epsilon: float, temperature_coeff: float,
           rng: np.random.Generator) -> bool:
    """Simulated-annealing acceptance at temperature `temperature_coeff * epsilon`.

    Accept on improvement, always at zero temperature, and otherwise with
    probability exp((g_new - g_best) / temperature).
    """
    if g_new >= g_best:
        return True
    temperature = temperature_coeff * epsilon
    if temperature == 0.0:
        return True
    return np.exp((g_new - g_best) / temperature) > rng.random()


def select_epsilon_greedy(view: SequentialView, store: HistoryStore, s: SOC,
                          alpha_next: StateValueLinear, epsilon: float,
                          portfolio_weights: Sequence[float],
                          providers: Sequence[Callable],
                          rng: np.random.Generator) -> DecisionRule:
    """Greedy point backup w.p. 1 - epsilon, else a portfolio-sampled rule."""
    if epsilon < rng.random():
        singleton = MaxPlaneCollection(s.tau + 1, [alpha_next], [None])
        return point_backup(view, store, singleton, s).rule
    k = int(rng.choice(len(providers), p=np.asarray(portfolio_weights)))
    return providers[k](view, store, s)


def run(view: SequentialView, cfg: SolverConfig,
        algorithm: str = "osarsa-seq") -> SolveResult:
    """The sequential oSARSA episode loop.

    Incumbent rules keep the blind policy's action as their default so the
    spliced policy stays total on whatever supports later chains generate.
    """
    rng = np.random.default_rng(cfg.seed)
    model = view.model
    gamma = model.gamma if cfg.gamma is None else cfg.gamma
    store = HistoryStore(view)
    ellp = view.ell_prime
    blind_actions, _ = heuristic_blind(model, view.horizon, gamma)
    providers = (
        random_rule_provider(rng),
        heuristic_mdp_policy(model, view.horizon, gamma),
        blind_rule_provider(blind_actions),
    )
    incumbent: list[DecisionRule] = [
        DecisionRule(tau=t, agent=view.agent_at(t),
                     private_ids=np.zeros(0, dtype=np.int64),
                     actions=np.zeros(0, dtype=np.int32),
                     default_action=int(blind_actions[view.agent_at(t)]))
        for t in range(ellp)
    ]
    alphas: list[StateValueLinear] = [zero_alpha(t) for t in range(ellp + 1)]
    g = np.full(ellp + 1, -np.inf)
    best_value, best_policy = -np.inf, None
    incumbent_value: float | None = None
    trace: list[TraceRecord] = []
    t0 = time.perf_counter()
    status = "ok"
    episode = 0
    while episode < cfg.episodes:
        wall = time.perf_counter() - t0
        if cfg.time_limit is not None and wall >= cfg.time_limit:
            status = "oot" if episode == 0 else status
            break
        eps = cfg.epsilon0 * (1.0 - episode / (cfg.episodes - 1)) \
            if cfg.episodes > 1 else 0.0
        s = initial_soc(view, store)
        socs = [s]
        tau0 = 0
        changed = False
        for tau in range(ellp):
            a_cand = select_epsilon_greedy(view, store, s, alphas[tau + 1], eps,
                                           cfg.portfolio_weights, providers, rng)
            s_next = soc_step(view, store, s, a_cand)
            if cfg.prune_eps > 0.0:
                s_next = prune(s_next, cfg.prune_eps)
            g_tilde = alphas[tau + 1].dot(s_next)
            if accept(float(g[tau + 1]), g_tilde, eps, cfg.temperature_coeff, rng):
                incumbent[tau] = replace(
                    a_cand, default_action=int(blind_actions[view.agent_at(tau)]))
                g[tau + 1] = g_tilde
                tau0 = tau
                changed = True
            s = s_next
            socs.append(s)
        for tau in range(tau0, -1, -1):
            alphas[tau] = compose_alpha(view, store, socs[tau], alphas[tau + 1],
                                        incumbent[tau])
        if changed or incumbent_value is None:
            incumbent_value = evaluate_seq_policy(view, incumbent, store=store,
                                                  prune_eps=cfg.prune_eps)
        if incumbent_value > best_value:
            best_value = incumbent_value
            best_policy = list(incumbent)
        trace.append(TraceRecord(episode, time.perf_counter() - t0, incumbent_value,
                                 best_value, eps, cfg.temperature_coeff * eps))
        episode += 1
    return SolveResult(algorithm=algorithm, best_value=best_value,
                       best_policy=best_policy, episodes=episode,
                       wall_time=time.perf_counter() - t0, trace=trace,
                       status=status)


def solve_model(model: DecPomdp, cfg: SolverConfig) -> SolveResult:
    """Convenience wrapper: sequentialize under cfg and run."""
    horizon = cfg.horizon if cfg.horizon is not None else model.default_horizon
    if cfg.gamma is not None and cfg.gamma != model.gamma:
        model = replace(model, gamma=cfg.gamma)
    view = sequentialize(model, ordering=cfg.ordering, horizon=horizon)
    return run(view, cfg)
