"""Multi-agent defense learning: shared belief, per-agent actors, joint critic.

Centralized training with distributed execution. All agents read the same
recurrent belief over the alert stream; each agent owns a softmax policy head
over its scope's actions; a joint critic scores (belief, joint action) pairs
against a slowly blended target copy. Updates run on short on-policy windows
(SARSA-style targets using the next sampled joint action), with the belief
encoder trained through the critic loss and truncated at window boundaries.

Ablation switches are exact code-path reductions: beta=0 drops the entropy
term, lam=0 drops the collision regularizer, central_critic=False swaps the
joint critic for independent per-agent critics over (belief, own action).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DivergenceError
from .nn import Adam, BeliefEncoderParams, DenseNetParams, dense_forward_np, gru_step, gru_step_np
from .surface import (
    Action,
    AssetGraph,
    AttackSurfaceEnv,
    FlowPools,
    JointAction,
    Observation,
    Scenario,
    agent_action_space,
    goal_reached,
    observation_dim,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Belief:
    """Recurrent summary of the alert history; the only policy/critic input."""

    vector: np.ndarray
    step: int = 0


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    beta: float = 0.01
    lam: float = 0.05
    lr: float = 1e-3
    tau: float = 0.01
    step_budget: int = 60_000
    window: int = 16
    belief_size: int = 32
    encoder_size: int = 64
    hidden: tuple[int, int] = (64, 64)
    central_critic: bool = True
    max_episodes: int | None = None
    seeds: int = 5

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("entropy and regularizer weights must be nonnegative")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("target blend tau must lie in (0, 1]")
        if self.lr <= 0 or self.window <= 0 or self.step_budget < 0:
            raise ConfigError("lr/window must be positive and step_budget nonnegative")

    def variant(self, name: str) -> "TrainConfig":
        from dataclasses import replace
        if name == "full":
            return self
        if name == "no-entropy":
            return replace(self, beta=0.0)
        if name == "no-game-reg":
            return replace(self, lam=0.0)
        if name in ("no-central-critic", "independent"):
            return replace(self, central_critic=False)
        raise ConfigError(f"unknown ablation variant {name!r}")


VARIANTS = ("full", "no-entropy", "no-game-reg", "no-central-critic")


@dataclass
class CriticPair:
    """Online critic and its slowly blended target copy."""

    online: DenseNetParams
    target: DenseNetParams


def blend_target(pair: CriticPair, tau: float) -> CriticPair:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    for lt, lo in zip(pair.target.layers, pair.online.layers):
        lt.weight.data = (1.0 - tau) * lt.weight.data + tau * lo.weight.data
        lt.bias.data = (1.0 - tau) * lt.bias.data + tau * lo.bias.data
    return pair


@dataclass(frozen=True)
class TransitionTuple:
    belief: np.ndarray
    actions: tuple[int, ...]
    reward: float
    belief_next: np.ndarray
    next_actions: tuple[int, ...]
    done: bool


def derive_seed(master: int, *labels) -> int:
    """Stable component seeds: hash the master seed with a label path."""
    import hashlib

    text = f"{master}/" + "/".join(str(l) for l in labels)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


@dataclass
class DefenderModel:
    """Everything needed to act: encoder, actor heads, critic(s), action maps."""

    encoder: BeliefEncoderParams
    actors: list[DenseNetParams]
    critics: list[CriticPair]
    central: bool
    action_spaces: list[list[Action]]
    obs_dim: int
    belief_size: int
    hidden: tuple[int, int]

    @property
    def n_agents(self) -> int:
        return len(self.actors)

    @property
    def action_sizes(self) -> list[int]:
        return [len(s) for s in self.action_spaces]

    @classmethod
    def build(cls, graph: AssetGraph, feature_dim: int, config: TrainConfig, rng: np.random.Generator) -> "DefenderModel":
        obs_dim = observation_dim(graph.n_nodes, feature_dim)
        h = config.belief_size
        spaces = [agent_action_space(graph, i) for i in range(graph.n_agents)]
        sizes = [len(s) for s in spaces]
        encoder = BeliefEncoderParams.create(rng, obs_dim, config.encoder_size, h)
        actors = [
            DenseNetParams.create(rng, [h, *config.hidden, sizes[i]], f"actor{i}")
            for i in range(graph.n_agents)
        ]
        if config.central_critic:
            critic_in = h + sum(sizes)
            critics = [CriticPair(
                online=DenseNetParams.create(rng, [critic_in, *config.hidden, 1], "critic"),
                target=DenseNetParams.create(rng, [critic_in, *config.hidden, 1], "critic_target"),
            )]
            _hard_copy(critics[0])
        else:
            critics = []
            for i in range(graph.n_agents):
                pair = CriticPair(
                    online=DenseNetParams.create(rng, [h + sizes[i], *config.hidden, 1], f"critic{i}"),
                    target=DenseNetParams.create(rng, [h + sizes[i], *config.hidden, 1], f"critic{i}_target"),
                )
                _hard_copy(pair)
                critics.append(pair)
        return cls(encoder, actors, critics, config.central_critic, spaces, obs_dim, h, config.hidden)

    # -- checkpointing ------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.encoder.parameters():
            out[p.name] = p.data
        for actor in self.actors:
            for p in actor.parameters():
                out[p.name] = p.data
        for pair in self.critics:
            for p in pair.online.parameters() + pair.target.parameters():
                out[p.name] = p.data
        return out

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {
            "central": self.central,
            "obs_dim": self.obs_dim,
            "belief_size": self.belief_size,
            "hidden": list(self.hidden),
            "action_sizes": self.action_sizes,
        }
        meta.update(extra_meta or {})
        nn.save_arrays(path, self.named_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path, graph: AssetGraph, feature_dim: int, config: TrainConfig) -> "DefenderModel":
        probe = cls.build(graph, feature_dim, config, np.random.default_rng(0))
        expected = {k: v.shape for k, v in probe.named_arrays().items()}
        arrays, meta = nn.load_arrays(path, expected)
        if meta.get("obs_dim") != probe.obs_dim or meta.get("action_sizes") != probe.action_sizes:
            raise nn.CheckpointError(
                f"{path}: checkpoint was trained for a different scenario/pool shape "
                f"(obs_dim {meta.get('obs_dim')} vs {probe.obs_dim})"
            )
        for p in _all_params(probe):
            p.data = arrays[p.name].copy()
        return probe


def _hard_copy(pair: CriticPair) -> None:
    blend_target(pair, 1.0)


def _all_params(model: DefenderModel) -> list[Tensor]:
    params = list(model.encoder.parameters())
    for actor in model.actors:
        params.extend(actor.parameters())
    for pair in model.critics:
        params.extend(pair.online.parameters())
        params.extend(pair.target.parameters())
    return params


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def belief_update(prev: Belief, obs: Observation, enc: BeliefEncoderParams) -> Belief:
    """b_t = GRU(b_{t-1}, psi(o_t)); pure numpy, no gradient tape."""
    x = np.tanh(obs.flatten() @ enc.psi.weight.data + enc.psi.bias.data)
    return Belief(vector=gru_step_np(enc.gru, prev.vector, x), step=prev.step + 1)


def initial_belief(size: int) -> Belief:
    return Belief(vector=np.zeros(size, dtype=np.float64), step=0)


def policy_probs(model: DefenderModel, belief_vec: np.ndarray) -> list[np.ndarray]:
    return [ad.softmax_np(dense_forward_np(actor, belief_vec)) for actor in model.actors]


def select_joint_action(
    belief: Belief,
    model: DefenderModel,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> tuple[JointAction, tuple[int, ...], list[np.ndarray]]:
    """Each agent draws from its own head given the shared belief.

    ``sample`` draws a_i ~ pi_i(.|b); ``greedy`` takes the argmax with ties
    resolved toward the lowest action index.
    """
    probs = policy_probs(model, belief.vector)
    indices = []
    for i, p in enumerate(probs):
        if mode == "greedy":
            indices.append(int(np.argmax(p)))
        elif mode == "sample":
            if rng is None:
                raise ConfigError("sample mode needs a random generator")
            cum = np.cumsum(p)
            indices.append(min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(p) - 1))
        else:
            raise ConfigError(f"unknown action-selection mode {mode!r}")
    actions = tuple(model.action_spaces[i][j] for i, j in enumerate(indices))
    return actions, tuple(indices), probs


def joint_onehot(action_sizes: list[int], indices: tuple[int, ...]) -> np.ndarray:
    """Concatenated one-hot encoding of a joint action."""
    parts = []
    for size, idx in zip(action_sizes, indices):
        v = np.zeros(size, dtype=np.float64)
        v[idx] = 1.0
        parts.append(v)
    return np.concatenate(parts)


def game_regularizer(probs: np.ndarray) -> float:
    """Collision probability sum_a pi(a)^2; 1/A at uniform, 1 at deterministic.

    Accepts one distribution or a batch of rows (averaged)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return float(np.sum(p * p))
    return float(np.mean(np.sum(p * p, axis=1)))


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    if p.ndim == 1:
        return float(-np.sum(terms))
    return float(np.mean(-np.sum(terms, axis=1)))


def _critic_forward(pair_net: DenseNetParams, belief_rows, onehot_rows: np.ndarray) -> Tensor:
    x = ad.concat([ad.as_tensor(belief_rows), Tensor(onehot_rows)], axis=1)
    q = pair_net.forward(x)
    return ad.tsum(q, axis=1)  # (n, 1) -> (n,)


def critic_td_loss(batch: list[TransitionTuple], critic: CriticPair, gamma: float,
                   action_sizes: list[int], belief_rows=None) -> Tensor:
    """Mean squared SARSA-style TD error against the target critic.

    ``belief_rows`` may carry graph-connected belief tensors so the encoder
    trains through the critic; by default the stored numeric beliefs are used.
    """
    if not batch:
        raise ConfigError("critic_td_loss needs a nonempty batch")
    if belief_rows is None:
        belief_rows = np.stack([tr.belief for tr in batch])
    onehots = np.stack([joint_onehot(action_sizes, tr.actions) for tr in batch])
    q = _critic_forward(critic.online, belief_rows, onehots)

    b_next = np.stack([tr.belief_next for tr in batch])
    next_onehots = np.stack([joint_onehot(action_sizes, tr.next_actions) for tr in batch])
    q_next = dense_forward_np(critic.target, np.concatenate([b_next, next_onehots], axis=1))[:, 0]
    rewards = np.array([tr.reward for tr in batch])
    live = np.array([0.0 if tr.done else 1.0 for tr in batch])
    targets = rewards + gamma * live * q_next

    diff = ad.sub(q, Tensor(targets))
    return ad.tmean(ad.square(diff))


def _counterfactual_advantages(model: DefenderModel, batch: list[TransitionTuple], agent: int) -> np.ndarray:
    """A_t = Q(b, a) - mean_a' Q(b, (a', a_-i)); the critic stays frozen here."""
    sizes = model.action_sizes
    n = len(batch)
    a_i = sizes[agent]
    beliefs = np.stack([tr.belief for tr in batch])
    if model.central:
        critic = model.critics[0].online
        base = np.stack([joint_onehot(sizes, tr.actions) for tr in batch])
        offset = sum(sizes[:agent])
        rows = np.repeat(base, a_i, axis=0)
        rows[:, offset:offset + a_i] = 0.0
        rows[np.arange(n * a_i), offset + np.tile(np.arange(a_i), n)] = 1.0
        b_rep = np.repeat(beliefs, a_i, axis=0)
        q_all = dense_forward_np(critic, np.concatenate([b_rep, rows], axis=1))[:, 0].reshape(n, a_i)
        q_taken = q_all[np.arange(n), [tr.actions[agent] for tr in batch]]
    else:
        critic = model.critics[agent].online
        eye = np.eye(a_i)
        b_rep = np.repeat(beliefs, a_i, axis=0)
        rows = np.tile(eye, (n, 1))
        q_all = dense_forward_np(critic, np.concatenate([b_rep, rows], axis=1))[:, 0].reshape(n, a_i)
        q_taken = q_all[np.arange(n), [tr.actions[agent] for tr in batch]]
    return q_taken - q_all.mean(axis=1)


def actor_objective(batch: list[TransitionTuple], model: DefenderModel, beta: float, lam: float,
                    agent: int) -> tuple[Tensor, dict[str, float]]:
    """Score-function surrogate whose gradient ascends
    E[Q] + beta*H(pi_i) - lam*Omega(pi_i) for one agent.

    Returns (objective tensor to maximize, logged term values). The critic is
    only read, never differentiated.
    """
    beliefs = np.stack([tr.belief for tr in batch])
    taken = np.array([tr.actions[agent] for tr in batch])
    adv = _counterfactual_advantages(model, batch, agent)

    logits = model.actors[agent].forward(Tensor(beliefs))
    logp = ad.log_softmax_rows(logits)
    p = ad.exp(logp)
    logp_taken = ad.gather_rows(logp, taken)
    score = ad.tmean(ad.mul(logp_taken, Tensor(adv)))

    ent = ad.tmean(ad.mul(ad.tsum(ad.mul(p, logp), axis=1), -1.0))
    coll = ad.tmean(ad.tsum(ad.mul(p, p), axis=1))

    objective = score
    if beta != 0.0:
        objective = ad.add(objective, ad.mul(ent, beta))
    if lam != 0.0:
        objective = ad.sub(objective, ad.mul(coll, lam))
    terms = {
        "advantage_mean": float(adv.mean()),
        "entropy": ent.item(),
        "entropy_term": beta * ent.item() if beta != 0.0 else 0.0,
        "collision": coll.item(),
        "reg_term": lam * coll.item() if lam != 0.0 else 0.0,
    }
    return objective, terms


@dataclass
class TrainResult:
    model: DefenderModel
    log: list[dict]
    env_steps: int
    config: TrainConfig

    def write_log(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class _WindowBuffer:
    """Collects completed transitions plus graph-connected belief tensors."""

    def __init__(self):
        self.transitions: list[TransitionTuple] = []
        self.belief_tensors: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.transitions)

    def clear(self) -> None:
        self.transitions.clear()
        self.belief_tensors.clear()


def train(
    scenario: Scenario,
    config: TrainConfig,
    seed: int,
    pools: FlowPools | None = None,
    checkpoint_on_divergence: str | Path | None = None,
) -> TrainResult:
    """Run the full training loop until the environment-step budget is spent.

    Per step: belief update, distributed action sampling, orchestrated
    execution, attacker move, shaped reward; per window: critic TD update
    (through the belief encoder), per-agent policy updates, target blend.
    """
    if pools is None:
        pools = FlowPools.synthetic(seed=derive_seed(seed, "pools"))
    init_rng = np.random.default_rng(derive_seed(seed, "init"))
    action_rng = np.random.default_rng(derive_seed(seed, "actions"))
    model = DefenderModel.build(scenario.graph, pools.d, config, init_rng)

    critic_params = []
    for pair in model.critics:
        critic_params.extend(pair.online.parameters())
    opt_critic = Adam(critic_params + model.encoder.parameters(), lr=config.lr)
    opt_actors = [Adam(actor.parameters(), lr=config.lr) for actor in model.actors]

    env = AttackSurfaceEnv(scenario, pools)
    sizes = model.action_sizes
    log: list[dict] = []
    steps = 0
    episode = 0
    goals = 0

    def run_update(buf: _WindowBuffer, stats: dict) -> None:
        if not buf.transitions:
            return
        belief_rows = ad.stack_rows(buf.belief_tensors)
        if model.central:
            loss = critic_td_loss(buf.transitions, model.critics[0], config.gamma, sizes, belief_rows)
        else:
            per_agent = []
            for i, pair in enumerate(model.critics):
                sub_batch = [
                    TransitionTuple(tr.belief, (tr.actions[i],), tr.reward, tr.belief_next,
                                    (tr.next_actions[i],), tr.done)
                    for tr in buf.transitions
                ]
                per_agent.append(critic_td_loss(sub_batch, pair, config.gamma, [sizes[i]], belief_rows))
            loss = ad.mul(ad.add(per_agent[0], sum(per_agent[1:])) if len(per_agent) > 1 else per_agent[0],
                          1.0 / len(per_agent))
        if not np.isfinite(loss.data):
            _abort_divergence(model, checkpoint_on_divergence, "critic loss")
        opt_critic.zero_grad()
        ad.backward(loss)
        try:
            opt_critic.step()
        except nn.NumericError as exc:
            _abort_divergence(model, checkpoint_on_divergence, str(exc))
        stats["critic_loss"].append(float(loss.data))

        for i in range(model.n_agents):
            objective, terms = actor_objective(buf.transitions, model, config.beta, config.lam, i)
            if not np.isfinite(objective.data):
                _abort_divergence(model, checkpoint_on_divergence, f"actor {i} objective")
            loss_i = ad.mul(objective, -1.0)
            opt_actors[i].zero_grad()
            ad.backward(loss_i)
            try:
                opt_actors[i].step()
            except nn.NumericError as exc:
                _abort_divergence(model, checkpoint_on_divergence, str(exc))
            stats["actor_obj"].append(float(objective.data))
            stats["entropy_term"].append(terms["entropy_term"])
            stats["reg_term"].append(terms["reg_term"])

        for pair in model.critics:
            blend_target(pair, config.tau)
        buf.clear()

    while steps < config.step_budget and (config.max_episodes is None or episode < config.max_episodes):
        ep_seed = derive_seed(seed, "train-ep", episode)
        state, obs = env.reset(ep_seed)
        belief_t = Tensor(np.zeros(config.belief_size))
        buf = _WindowBuffer()
        stats: dict[str, list[float]] = {"critic_loss": [], "actor_obj": [], "entropy_term": [], "reg_term": []}
        ep_return = 0.0
        levels_trace = []
        pending: dict | None = None
        done = False

        while not done and steps < config.step_budget:
            x = ad.tanh(ad.add(ad.matmul(Tensor(obs.flatten()), model.encoder.psi.weight), model.encoder.psi.bias))
            belief_t = gru_step(model.encoder.gru, belief_t, x)
            b_np = belief_t.data.copy()

            actions, indices, _ = select_joint_action(Belief(b_np), model, "sample", action_rng)
            if pending is not None:
                buf.transitions.append(TransitionTuple(
                    pending["b"], pending["actions"], pending["r"], b_np, indices, False))
                buf.belief_tensors.append(pending["b_tensor"])
                if len(buf) >= config.window:
                    run_update(buf, stats)
                    belief_t = Tensor(belief_t.data.copy())

            state, obs, reward, done, info = env.step(actions)
            steps += 1
            ep_return += reward
            levels_trace.append(state.levels.copy())

            if done:
                buf.transitions.append(TransitionTuple(
                    b_np, indices, reward, np.zeros_like(b_np), tuple(0 for _ in sizes), True))
                buf.belief_tensors.append(belief_t)
                pending = None
            else:
                pending = {"b": b_np, "b_tensor": belief_t, "actions": indices, "r": reward}

        run_update(buf, stats)
        episode += 1
        goal = goal_reached(np.array(levels_trace), state.exfiltrated, scenario.w_persist) if levels_trace else False
        goals += int(goal)
        log.append({
            "episode": episode,
            "return": ep_return,
            "length": len(levels_trace),
            "goal": bool(goal),
            "asr_so_far": goals / episode,
            "env_steps": steps,
            "critic_loss": _mean(stats["critic_loss"]),
            "actor_obj": _mean(stats["actor_obj"]),
            "entropy_term": _mean(stats["entropy_term"]),
            "reg_term": _mean(stats["reg_term"]),
        })

    return TrainResult(model=model, log=log, env_steps=steps, config=config)


def _mean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else 0.0


def _abort_divergence(model: DefenderModel, path: str | Path | None, what: str) -> None:
    if path is not None:
        model.save(path, extra_meta={"aborted": what})
        raise DivergenceError(f"non-finite {what}; last finite parameters saved to {path}")
    raise DivergenceError(f"non-finite {what}")


class RLShieldPolicy:
    """Acting wrapper: tracks the belief and draws per-agent actions."""

    def __init__(self, model: DefenderModel, mode: str = "sample", rng: np.random.Generator | None = None):
        self.model = model
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.belief = initial_belief(model.belief_size)

    def reset(self) -> None:
        self.belief = initial_belief(self.model.belief_size)

    def act(self, obs: Observation) -> tuple[JointAction, list[np.ndarray]]:
        self.belief = belief_update(self.belief, obs, self.model.encoder)
        actions, _, probs = select_joint_action(self.belief, self.model, self.mode, self.rng)
        return actions, probs
