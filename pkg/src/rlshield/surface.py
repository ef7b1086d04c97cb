"""Attack-surface MDP: asset graph, hidden compromise state, attackers, alerts.

The hidden state tracks a four-rung compromise ladder per asset (clean,
foothold, privileged, staged) plus an exfiltration flag. Within one step the
defenders' orchestrated plan is applied first, then the attacker moves, then
a noisy, possibly delayed observation is emitted from the flow-feature pools.

Defender action mechanics (the narrative names them, the numbers here are
scenario defaults and fully config-overridable):
  IsolateHost     removes the node's edges until Recover runs on it
  BlockSource     halves attacker success probability into that node
  ResetCredentials demotes privileged -> foothold with prob reset_success
  ThrottleService halves exfiltration success from that node
  DeployRule      multiplies the node's miss probability by deploy_rule_factor
  Recover         cleans the node with prob recover_success, restores edges

All transition functions are deterministic given the generator stream, so a
(graph, attacker, seed, action sequence) tuple pins down the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataError
from .flowdata import SPLIT_TRAIN, Dataset, SynthConfig, fit_stats, synth_flows, time_split, transform, default_split_spec

CLEAN, FOOTHOLD, PRIVILEGED, STAGED = 0, 1, 2, 3
LEVEL_MAX = STAGED


class ScenarioError(ConfigError):
    """Scenario file violates a structural invariant."""


class ContractViolation(ValueError):
    """An action targeted a node outside the acting agent's scope."""


class NodeKind(str, Enum):
    HOST = "host"
    SERVICE = "service"
    ACCOUNT = "account"
    CONTROL = "control"


@dataclass(frozen=True)
class Asset:
    name: str
    kind: NodeKind
    criticality: float

    def __post_init__(self):
        if not 0.0 < self.criticality <= 1.0:
            raise ScenarioError(f"criticality of {self.name!r} must be in (0, 1], got {self.criticality}")


@dataclass(frozen=True)
class AssetGraph:
    """Directed reachability over assets, partitioned into per-agent scopes."""

    nodes: tuple[Asset, ...]
    edges: tuple[tuple[int, int], ...]
    agent_scopes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.nodes:
            raise ScenarioError("asset graph must be nonempty")
        n = len(self.nodes)
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ScenarioError(f"edge ({u}, {v}) references a missing node")
        seen: set[int] = set()
        for scope in self.agent_scopes:
            for node in scope:
                if node in seen:
                    raise ScenarioError(f"node {node} appears in two agent scopes")
                seen.add(node)
        if seen != set(range(n)):
            raise ScenarioError("agent scopes must partition the node set")
        if n > 1 and not self._weakly_connected():
            raise ScenarioError("asset graph must be weakly connected")
        out: list[list[int]] = [[] for _ in range(n)]
        for u, v in self.edges:
            out[u].append(v)
        object.__setattr__(self, "_out", tuple(tuple(sorted(vs)) for vs in out))

    def _weakly_connected(self) -> bool:
        n = len(self.nodes)
        adj: list[set[int]] = [set() for _ in range(n)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == n

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_agents(self) -> int:
        return len(self.agent_scopes)

    @property
    def criticality(self) -> np.ndarray:
        return np.array([a.criticality for a in self.nodes])

    def out_neighbors(self, u: int) -> tuple[int, ...]:
        return self._out[u]


class ActionKind(IntEnum):
    """Defender action kinds; the integer order is the orchestration order."""

    NOOP = 0
    ISOLATE_HOST = 1
    BLOCK_SOURCE = 2
    RESET_CREDENTIALS = 3
    THROTTLE_SERVICE = 4
    DEPLOY_RULE = 5
    RECOVER = 6


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    target: int | None = None

    def __post_init__(self):
        if self.kind is ActionKind.NOOP and self.target is not None:
            raise ContractViolation("NoOp takes no target")
        if self.kind is not ActionKind.NOOP and self.target is None:
            raise ContractViolation(f"{self.kind.name} needs a target node")

    def encode(self) -> str:
        return "NoOp" if self.kind is ActionKind.NOOP else f"{self.kind.name}:{self.target}"

    @classmethod
    def decode(cls, text: str) -> "Action":
        if text == "NoOp":
            return cls(ActionKind.NOOP)
        kind, _, target = text.partition(":")
        return cls(ActionKind[kind], int(target))


NOOP = Action(ActionKind.NOOP)
TARGETED_KINDS = (
    ActionKind.ISOLATE_HOST,
    ActionKind.BLOCK_SOURCE,
    ActionKind.RESET_CREDENTIALS,
    ActionKind.THROTTLE_SERVICE,
    ActionKind.DEPLOY_RULE,
    ActionKind.RECOVER,
)


def agent_action_space(graph: AssetGraph, agent: int) -> list[Action]:
    """NoOp plus every (kind, scope node) pair, in a fixed index order."""
    scope = sorted(graph.agent_scopes[agent])
    return [NOOP] + [Action(kind, n) for kind in TARGETED_KINDS for n in scope]


JointAction = tuple[Action, ...]


def validate_joint_action(graph: AssetGraph, actions: JointAction) -> None:
    if len(actions) != graph.n_agents:
        raise ContractViolation(f"expected {graph.n_agents} agent actions, got {len(actions)}")
    for i, act in enumerate(actions):
        if act.kind is not ActionKind.NOOP and act.target not in graph.agent_scopes[i]:
            raise ContractViolation(f"agent {i} cannot target node {act.target} outside its scope")


def execution_plan(actions: JointAction) -> tuple[list[Action], list[Action]]:
    """Canonical execution order with duplicates removed.

    Containment (isolate, block) runs before credential resets, throttling,
    rule deployment and recovery. Returns (ordered plan, per-agent executed
    actions) where a deduplicated proposal is demoted to NoOp.
    """
    chosen: dict[tuple[int, int], int] = {}
    executed = list(actions)
    for i, act in enumerate(actions):
        if act.kind is ActionKind.NOOP:
            continue
        key = (int(act.kind), act.target)
        if key in chosen:
            executed[i] = NOOP
        else:
            chosen[key] = i
    plan = sorted((actions[i] for i in chosen.values()), key=lambda a: (int(a.kind), a.target))
    return plan, executed


@dataclass(frozen=True)
class CostTable:
    """Response cost and base disruption per action kind.

    Disruption of an executed action scales with the target's criticality;
    the base values here also classify which kinds count as high-disruption.
    """

    cost: dict[ActionKind, float]
    disrupt: dict[ActionKind, float]

    def __post_init__(self):
        for kind in ActionKind:
            if kind not in self.cost or kind not in self.disrupt:
                raise ScenarioError(f"cost table missing entry for {kind.name}")
        if self.cost[ActionKind.NOOP] != 0.0 or self.disrupt[ActionKind.NOOP] != 0.0:
            raise ScenarioError("NoOp must have zero cost and zero disruption")
        ranked = sorted(ActionKind, key=lambda k: self.disrupt[k], reverse=True)
        if set(ranked[:2]) != {ActionKind.ISOLATE_HOST, ActionKind.RECOVER}:
            raise ScenarioError("IsolateHost and Recover must carry the two largest disruption values")

    def plan_cost(self, plan: list[Action]) -> float:
        return float(sum(self.cost[a.kind] for a in plan))

    def plan_disrupt(self, plan: list[Action], graph: AssetGraph) -> float:
        total = 0.0
        for a in plan:
            if a.kind is not ActionKind.NOOP:
                total += self.disrupt[a.kind] * graph.nodes[a.target].criticality
        return float(total)


DEFAULT_COSTS = {
    ActionKind.NOOP: (0.0, 0.0),
    ActionKind.DEPLOY_RULE: (0.05, 0.01),
    ActionKind.BLOCK_SOURCE: (0.1, 0.05),
    ActionKind.THROTTLE_SERVICE: (0.1, 0.15),
    ActionKind.RESET_CREDENTIALS: (0.2, 0.2),
    ActionKind.ISOLATE_HOST: (0.3, 0.5),
    ActionKind.RECOVER: (0.4, 0.6),
}


def default_cost_table() -> CostTable:
    return CostTable(
        cost={k: c for k, (c, _) in DEFAULT_COSTS.items()},
        disrupt={k: d for k, (_, d) in DEFAULT_COSTS.items()},
    )


@dataclass(frozen=True)
class RewardWeights:
    """Trade-off weights of the shaped reward.

    delta_sec is normalized by 3|V| (one full recovery moves it by ~1/36 on
    the default graph), so w_s must sit well above the per-action cost scale
    for defense to be worth its price."""

    w_s: float = 30.0
    w_c: float = 0.5
    w_d: float = 0.5

    def __post_init__(self):
        if min(self.w_s, self.w_c, self.w_d) < 0:
            raise ScenarioError("reward weights must be nonnegative")
        if self.w_s == self.w_c == self.w_d == 0.0:
            raise ScenarioError("reward weights must not all be zero")


@dataclass(frozen=True)
class NoiseParams:
    """Alert emission noise: miss rate, false-alarm rate, delay geometry."""

    p_miss: float = 0.25
    p_fa: float = 0.02
    p_delay: float = 0.6

    def __post_init__(self):
        for name in ("p_miss", "p_fa"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must be in [0, 1]")
        if not 0.0 < self.p_delay <= 1.0:
            raise ScenarioError("p_delay must be in (0, 1]")


@dataclass(frozen=True)
class ActionParams:
    """Success probabilities and modifiers for defender action mechanics."""

    reset_success: float = 0.9
    recover_success: float = 0.95
    deploy_rule_factor: float = 0.5
    block_factor: float = 0.5
    throttle_factor: float = 0.5


class AttackerStrength(str, Enum):
    BASIC = "basic"
    SKILLED = "skilled"
    ADAPTIVE = "adaptive"


class AttackKind(IntEnum):
    DWELL = 0
    MOVE = 1        # foothold on an adjacent clean node
    ESCALATE = 2    # foothold -> privileged, in place
    STAGE = 3       # privileged -> staged, in place
    EXFILTRATE = 4  # cash out from a staged, non-isolated node


@dataclass(frozen=True)
class AttackerAction:
    kind: AttackKind
    source: int | None = None
    target: int | None = None


DWELL = AttackerAction(AttackKind.DWELL)

DEFAULT_PROGRESS = {
    AttackKind.MOVE: 1.0,
    AttackKind.ESCALATE: 2.0,
    AttackKind.STAGE: 2.0,
    AttackKind.EXFILTRATE: 3.0,
}


@dataclass(frozen=True)
class AttackerModel:
    strength: AttackerStrength
    success: dict[str, float] = field(default_factory=dict)
    kappa: float = 1.0
    explore_eps: float = 0.1
    progress: dict[AttackKind, float] = field(default_factory=lambda: dict(DEFAULT_PROGRESS))

    def __post_init__(self):
        for name, p in self.success.items():
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"attacker success probability {name}={p} outside [0, 1]")


DEFAULT_SUCCESS = {
    AttackerStrength.BASIC: {"move": 0.5, "escalate": 0.35, "stage": 0.35, "exfiltrate": 0.5},
    AttackerStrength.SKILLED: {"move": 0.7, "escalate": 0.6, "stage": 0.6, "exfiltrate": 0.7},
    AttackerStrength.ADAPTIVE: {"move": 0.8, "escalate": 0.7, "stage": 0.7, "exfiltrate": 0.8},
}


def default_attacker(strength: AttackerStrength | str) -> AttackerModel:
    strength = AttackerStrength(strength)
    return AttackerModel(strength=strength, success=dict(DEFAULT_SUCCESS[strength]))


@dataclass(frozen=True)
class WorldState:
    """Hidden per-asset compromise plus the alert pipeline state."""

    levels: np.ndarray                 # (V,) int8 in {0..3}
    exfiltrated: bool
    t: int
    isolated: np.ndarray               # (V,) bool
    blocked: np.ndarray                # (V,) bool
    throttled: np.ndarray              # (V,) bool
    miss_factor: np.ndarray            # (V,) float, multiplies p_miss
    ever_staged: bool = False
    pending_alarms: tuple[tuple[int, int, int], ...] = ()  # (due_step, node, delay)

    @property
    def frontier(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.where(self.levels > CLEAN)[0])

    @property
    def compromise_mass(self) -> int:
        return int(self.levels.sum())

    def copy_arrays(self) -> dict:
        return dict(
            levels=self.levels.copy(),
            isolated=self.isolated.copy(),
            blocked=self.blocked.copy(),
            throttled=self.throttled.copy(),
            miss_factor=self.miss_factor.copy(),
        )


@dataclass(frozen=True)
class Observation:
    """Per-node alert view: flow-feature vectors, alarm flags, arrival delays."""

    features: np.ndarray   # (V, d)
    alarms: np.ndarray     # (V,) bool
    delays: np.ndarray     # (V,) int, delay of the alarm surfacing this step

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.features.ravel(),
            self.alarms.astype(np.float64),
            self.delays.astype(np.float64),
        ])


def observation_dim(n_nodes: int, d: int) -> int:
    return n_nodes * (d + 2)


@dataclass(frozen=True)
class FlowPools:
    """Benign/attack feature pools the alert emitter samples from."""

    benign: np.ndarray
    attack: np.ndarray

    def __post_init__(self):
        if len(self.benign) == 0 or len(self.attack) == 0:
            raise ConfigError("flow pools must contain at least one benign and one attack row")
        if self.benign.shape[1] != self.attack.shape[1]:
            raise ConfigError("benign and attack pools disagree on feature dimension")

    @property
    def d(self) -> int:
        return self.benign.shape[1]

    @classmethod
    def from_dataset(cls, ds: Dataset, split: int = SPLIT_TRAIN) -> "FlowPools":
        mask = ds.split_mask(split)
        if not mask.any():
            raise DataError("requested split is empty; cannot build flow pools")
        X, y = ds.features[mask], ds.y[mask]
        return cls(benign=X[y == 0].copy(), attack=X[y == 1].copy())

    @classmethod
    def synthetic(cls, d: int = 16, seed: int = 0, rows: int = 2000) -> "FlowPools":
        ds = synth_flows(SynthConfig(d=d, rows=rows, attack_fraction=0.3), seed)
        ds = time_split(ds, default_split_spec(ds))
        stats = fit_stats(ds)
        return cls.from_dataset(transform(ds, stats))


def reset_state(graph: AssetGraph, rng: np.random.Generator) -> WorldState:
    """One uniformly chosen entry node starts at foothold; everything else clean."""
    n = graph.n_nodes
    levels = np.zeros(n, dtype=np.int8)
    entry = int(rng.integers(n))
    levels[entry] = FOOTHOLD
    return WorldState(
        levels=levels,
        exfiltrated=False,
        t=0,
        isolated=np.zeros(n, dtype=bool),
        blocked=np.zeros(n, dtype=bool),
        throttled=np.zeros(n, dtype=bool),
        miss_factor=np.ones(n, dtype=np.float64),
    )


def apply_defender(graph: AssetGraph, state: WorldState, plan: list[Action],
                   params: ActionParams, rng: np.random.Generator) -> WorldState:
    """Apply the orchestrated plan in order; one RNG draw per stochastic effect."""
    s = state.copy_arrays()
    for act in plan:
        n = act.target
        if act.kind is ActionKind.ISOLATE_HOST:
            s["isolated"][n] = True
        elif act.kind is ActionKind.BLOCK_SOURCE:
            s["blocked"][n] = True
        elif act.kind is ActionKind.RESET_CREDENTIALS:
            if s["levels"][n] == PRIVILEGED and rng.random() < params.reset_success:
                s["levels"][n] = FOOTHOLD
        elif act.kind is ActionKind.THROTTLE_SERVICE:
            s["throttled"][n] = True
        elif act.kind is ActionKind.DEPLOY_RULE:
            s["miss_factor"][n] *= params.deploy_rule_factor
        elif act.kind is ActionKind.RECOVER:
            s["isolated"][n] = False
            if s["levels"][n] > CLEAN and rng.random() < params.recover_success:
                s["levels"][n] = CLEAN
    return replace(state, **s)


def feasible_attacker_actions(graph: AssetGraph, state: WorldState) -> list[AttackerAction]:
    """Concrete attacker moves available in this state, in a fixed order."""
    out: list[AttackerAction] = []
    levels, isolated = state.levels, state.isolated
    frontier = [int(i) for i in np.where(levels > CLEAN)[0]]
    for u in frontier:
        if isolated[u]:
            continue
        for v in graph.out_neighbors(u):
            if levels[v] == CLEAN and not isolated[v]:
                out.append(AttackerAction(AttackKind.MOVE, source=u, target=v))
    for n in frontier:
        if levels[n] == FOOTHOLD:
            out.append(AttackerAction(AttackKind.ESCALATE, source=n, target=n))
    for n in frontier:
        if levels[n] == PRIVILEGED:
            out.append(AttackerAction(AttackKind.STAGE, source=n, target=n))
    for n in frontier:
        if levels[n] == STAGED and not isolated[n]:
            out.append(AttackerAction(AttackKind.EXFILTRATE, source=n, target=n))
    return out


def _detection_probability(action: AttackerAction, state: WorldState, noise: NoiseParams) -> float:
    """Chance the touched node raises a same-step alarm, per the emission model."""
    node = action.target if action.kind is not AttackKind.EXFILTRATE else action.source
    p_miss = min(1.0, noise.p_miss * state.miss_factor[node])
    return (1.0 - p_miss) * noise.p_delay


def attacker_act(graph: AssetGraph, state: WorldState, model: AttackerModel,
                 rng: np.random.Generator, noise: NoiseParams | None = None) -> AttackerAction:
    """Pick the attacker's move. Dwell when nothing is feasible.

    Basic picks uniformly; Skilled follows the fixed priority escalate >
    move-toward-highest-criticality > exfiltrate; Adaptive maximizes progress
    value minus kappa times detection probability, with eps-greedy exploration.
    """
    feasible = feasible_attacker_actions(graph, state)
    if not feasible:
        return DWELL
    if model.strength is AttackerStrength.BASIC:
        return feasible[int(rng.integers(len(feasible)))]
    if model.strength is AttackerStrength.SKILLED:
        for kinds, key in (
            ((AttackKind.ESCALATE,), lambda a: a.target),
            ((AttackKind.MOVE,), lambda a: (-graph.nodes[a.target].criticality, a.target, a.source)),
            ((AttackKind.STAGE, AttackKind.EXFILTRATE), lambda a: a.target),
        ):
            group = [a for a in feasible if a.kind in kinds]
            if group:
                return min(group, key=key)
        return DWELL
    # adaptive: stealth-aware argmax with exploration
    if rng.random() < model.explore_eps:
        return feasible[int(rng.integers(len(feasible)))]
    if noise is None:
        raise ConfigError("adaptive attacker needs the emission noise parameters")

    def score(a: AttackerAction) -> float:
        return model.progress[a.kind] - model.kappa * _detection_probability(a, state, noise)

    return min(feasible, key=lambda a: (-score(a), a.target, int(a.kind), a.source))


def apply_attacker(graph: AssetGraph, state: WorldState, action: AttackerAction,
                   model: AttackerModel, rng: np.random.Generator,
                   params: ActionParams) -> WorldState:
    """Roll the action's success and apply its effect."""
    if action.kind is AttackKind.DWELL:
        return state
    s = state.copy_arrays()
    exfiltrated = state.exfiltrated
    ever_staged = state.ever_staged
    if action.kind is AttackKind.MOVE:
        p = model.success.get("move", 0.5)
        if s["blocked"][action.target]:
            p *= params.block_factor
        if rng.random() < p:
            s["levels"][action.target] = FOOTHOLD
    elif action.kind is AttackKind.ESCALATE:
        if rng.random() < model.success.get("escalate", 0.5):
            s["levels"][action.target] = PRIVILEGED
    elif action.kind is AttackKind.STAGE:
        if rng.random() < model.success.get("stage", 0.5):
            s["levels"][action.target] = STAGED
            ever_staged = True
    elif action.kind is AttackKind.EXFILTRATE:
        p = model.success.get("exfiltrate", 0.5)
        if s["throttled"][action.source]:
            p *= params.throttle_factor
        if rng.random() < p:
            exfiltrated = True
    return replace(state, exfiltrated=exfiltrated, ever_staged=ever_staged, **s)


def delta_sec(state: WorldState, state_next: WorldState) -> float:
    """Normalized reduction in compromise mass; positive when defense gains ground."""
    n = len(state.levels)
    return (state.compromise_mass - state_next.compromise_mass) / (3.0 * n)


def emit_observation(graph: AssetGraph, state: WorldState, pools: FlowPools,
                     noise: NoiseParams, rng: np.random.Generator) -> tuple[Observation, WorldState]:
    """Draw the per-node alert view for the current step.

    Compromised nodes raise a true alarm with prob (1 - p_miss*miss_factor),
    delayed by a geometric number of steps; clean nodes false-alarm with prob
    p_fa (surfacing immediately). Alarmed nodes show attack-pool features,
    everything else benign-pool features.
    """
    n = graph.n_nodes
    now = state.t
    pending = list(state.pending_alarms)
    compromised = state.levels > CLEAN
    rolls = rng.random(n)  # one roll per node, in node order
    p_miss_eff = np.minimum(1.0, noise.p_miss * state.miss_factor)
    true_hits = np.where(compromised & (rolls < 1.0 - p_miss_eff))[0]
    if len(true_hits):
        delays_drawn = rng.geometric(noise.p_delay, size=len(true_hits)) - 1
        for node, delay in zip(true_hits, delays_drawn):
            pending.append((now + int(delay), int(node), int(delay)))
    if noise.p_fa > 0:
        for node in np.where(~compromised & (rolls < noise.p_fa))[0]:
            pending.append((now, int(node), 0))

    alarms = np.zeros(n, dtype=bool)
    delays = np.zeros(n, dtype=np.int64)
    remaining: list[tuple[int, int, int]] = []
    for due, node, delay in pending:
        if due <= now:
            if not alarms[node] or delay < delays[node]:
                delays[node] = delay
            alarms[node] = True
        else:
            remaining.append((due, node, delay))

    rows_attack = rng.integers(len(pools.attack), size=n)
    rows_benign = rng.integers(len(pools.benign), size=n)
    features = np.where(alarms[:, None], pools.attack[rows_attack], pools.benign[rows_benign])

    obs = Observation(features=features, alarms=alarms, delays=delays)
    return obs, replace(state, pending_alarms=tuple(remaining))


def goal_reached(levels_trace: np.ndarray, exfiltrated: bool, w_persist: int) -> bool:
    """Attacker goal: exfiltration, or one node at privileged-or-above for the
    final ``w_persist`` consecutive steps of the trace."""
    if exfiltrated:
        return True
    trace = np.asarray(levels_trace)
    if len(trace) < w_persist or w_persist <= 0:
        return False
    tail = trace[-w_persist:]
    return bool(np.any(np.all(tail >= PRIVILEGED, axis=0)))


@dataclass(frozen=True)
class Scenario:
    """Complete environment description, loadable from a YAML file."""

    graph: AssetGraph
    attacker: AttackerModel
    cost_table: CostTable
    reward_weights: RewardWeights
    noise: NoiseParams
    action_params: ActionParams
    horizon: int = 64
    w_persist: int = 8
    seed: int = 0
    name: str = "scenario"

    def with_attacker(self, strength: AttackerStrength | str) -> "Scenario":
        return replace(self, attacker=default_attacker(strength))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": [
                {"name": a.name, "kind": a.kind.value, "criticality": a.criticality} for a in self.graph.nodes
            ],
            "edges": [list(e) for e in self.graph.edges],
            "agent_scopes": [list(s) for s in self.graph.agent_scopes],
            "attacker": {
                "strength": self.attacker.strength.value,
                "success": dict(self.attacker.success),
                "kappa": self.attacker.kappa,
                "explore_eps": self.attacker.explore_eps,
                "progress": {k.name.lower(): v for k, v in self.attacker.progress.items()},
            },
            "cost_table": {k.name: [self.cost_table.cost[k], self.cost_table.disrupt[k]] for k in ActionKind},
            "reward_weights": {"w_s": self.reward_weights.w_s, "w_c": self.reward_weights.w_c,
                               "w_d": self.reward_weights.w_d},
            "noise": {"p_miss": self.noise.p_miss, "p_fa": self.noise.p_fa, "p_delay": self.noise.p_delay},
            "action_params": {
                "reset_success": self.action_params.reset_success,
                "recover_success": self.action_params.recover_success,
                "deploy_rule_factor": self.action_params.deploy_rule_factor,
                "block_factor": self.action_params.block_factor,
                "throttle_factor": self.action_params.throttle_factor,
            },
            "horizon": self.horizon,
            "w_persist": self.w_persist,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        try:
            nodes = tuple(Asset(n["name"], NodeKind(n["kind"]), float(n["criticality"])) for n in raw["nodes"])
            graph = AssetGraph(
                nodes=nodes,
                edges=tuple((int(u), int(v)) for u, v in raw["edges"]),
                agent_scopes=tuple(tuple(int(n) for n in s) for s in raw["agent_scopes"]),
            )
            atk = raw.get("attacker", {})
            attacker = AttackerModel(
                strength=AttackerStrength(atk.get("strength", "basic")),
                success=dict(atk.get("success", DEFAULT_SUCCESS[AttackerStrength(atk.get("strength", "basic"))])),
                kappa=float(atk.get("kappa", 1.0)),
                explore_eps=float(atk.get("explore_eps", 0.1)),
                progress={AttackKind[k.upper()]: float(v)
                          for k, v in atk.get("progress", {k.name.lower(): v for k, v in DEFAULT_PROGRESS.items()}).items()},
            )
            costs_raw = raw.get("cost_table")
            if costs_raw:
                cost_table = CostTable(
                    cost={ActionKind[k]: float(v[0]) for k, v in costs_raw.items()},
                    disrupt={ActionKind[k]: float(v[1]) for k, v in costs_raw.items()},
                )
            else:
                cost_table = default_cost_table()
            rw = raw.get("reward_weights", {})
            ap = raw.get("action_params", {})
            return cls(
                graph=graph,
                attacker=attacker,
                cost_table=cost_table,
                reward_weights=RewardWeights(**rw) if rw else RewardWeights(),
                noise=NoiseParams(**raw.get("noise", {})),
                action_params=ActionParams(**ap) if ap else ActionParams(),
                horizon=int(raw.get("horizon", 64)),
                w_persist=int(raw.get("w_persist", 8)),
                seed=int(raw.get("seed", 0)),
                name=str(raw.get("name", "scenario")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"malformed scenario: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ScenarioError(f"{path}: scenario file must hold a mapping")
        return cls.from_dict(raw)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def default_scenario(attacker: AttackerStrength | str = AttackerStrength.BASIC) -> Scenario:
    """12 assets (6 hosts, 3 services, 2 accounts, 1 control), 4 defender agents."""
    hosts = [Asset(f"h{i}", NodeKind.HOST, c) for i, c in enumerate((0.3, 0.35, 0.4, 0.45, 0.5, 0.55))]
    services = [Asset(f"s{i}", NodeKind.SERVICE, c) for i, c in enumerate((0.8, 0.9, 1.0))]
    accounts = [Asset(f"a{i}", NodeKind.ACCOUNT, c) for i, c in enumerate((0.6, 0.65))]
    control = [Asset("c0", NodeKind.CONTROL, 1.0)]
    nodes = tuple(hosts + services + accounts + control)  # indices: h 0-5, s 6-8, a 9-10, c 11

    ring = [(i, (i + 1) % 6) for i in range(6)]
    host_edges = [e for pair in ring for e in (pair, pair[::-1])]
    up_edges = [(0, 6), (1, 6), (2, 7), (3, 7), (4, 8), (5, 8),
                (6, 9), (7, 9), (7, 10), (8, 10), (9, 11), (10, 11)]
    back_edges = [(6, 1), (8, 4)]

    graph = AssetGraph(
        nodes=nodes,
        edges=tuple(host_edges + up_edges + back_edges),
        agent_scopes=((0, 1, 2), (3, 4, 5), (6, 7, 8), (9, 10, 11)),
    )
    return Scenario(
        graph=graph,
        attacker=default_attacker(attacker),
        cost_table=default_cost_table(),
        reward_weights=RewardWeights(),
        noise=NoiseParams(),
        action_params=ActionParams(),
        horizon=64,
        w_persist=8,
        seed=0,
        name="default-12",
    )


def chain_scenario(n_nodes: int = 3, horizon: int = 32) -> Scenario:
    """Small path graph with a single defender agent; handy for brute-force oracles."""
    crits = [0.5, 0.7, 1.0, 0.8, 0.6, 0.9][:n_nodes] + [0.5] * max(0, n_nodes - 6)
    nodes = tuple(Asset(f"n{i}", NodeKind.HOST, crits[i]) for i in range(n_nodes))
    edges = tuple((i, i + 1) for i in range(n_nodes - 1))
    graph = AssetGraph(nodes=nodes, edges=edges, agent_scopes=(tuple(range(n_nodes)),))
    return Scenario(
        graph=graph,
        attacker=default_attacker(AttackerStrength.BASIC),
        cost_table=default_cost_table(),
        reward_weights=RewardWeights(),
        noise=NoiseParams(p_miss=0.0, p_fa=0.0, p_delay=1.0),
        action_params=ActionParams(),
        horizon=horizon,
        w_persist=4,
        seed=0,
        name=f"chain-{n_nodes}",
    )


class AttackSurfaceEnv:
    """Stateful wrapper over the functional transition core.

    One instance is owned by one episode runner; independent instances with
    independent seed streams may run in parallel.
    """

    def __init__(self, scenario: Scenario, pools: FlowPools):
        self.scenario = scenario
        self.pools = pools
        self.state: WorldState | None = None
        self.done = True
        self._rng: np.random.Generator | None = None

    @property
    def graph(self) -> AssetGraph:
        return self.scenario.graph

    def reset(self, seed: int) -> tuple[WorldState, Observation]:
        self._rng = np.random.default_rng(seed)
        self.state = reset_state(self.graph, self._rng)
        obs, self.state = emit_observation(self.graph, self.state, self.pools, self.scenario.noise, self._rng)
        self.done = False
        return self.state, obs

    def step(self, actions: JointAction) -> tuple[WorldState, Observation, float, bool, dict]:
        if self.done or self.state is None:
            raise RuntimeError("step called on a finished episode; call reset first")
        sc = self.scenario
        validate_joint_action(self.graph, actions)
        plan, executed = execution_plan(actions)

        s_prev = self.state
        s_mid = apply_defender(self.graph, s_prev, plan, sc.action_params, self._rng)
        atk = attacker_act(self.graph, s_mid, sc.attacker, self._rng, sc.noise)
        s_next = apply_attacker(self.graph, s_mid, atk, sc.attacker, self._rng, sc.action_params)
        s_next = replace(s_next, t=s_prev.t + 1)

        dsec = delta_sec(s_prev, s_next)
        cost = sc.cost_table.plan_cost(plan)
        disrupt = sc.cost_table.plan_disrupt(plan, self.graph)
        reward = sc.reward_weights.w_s * dsec - sc.reward_weights.w_c * cost - sc.reward_weights.w_d * disrupt

        obs, s_next = emit_observation(self.graph, s_next, self.pools, sc.noise, self._rng)
        self.state = s_next
        self.done = bool(s_next.exfiltrated or not s_next.frontier or s_next.t >= sc.horizon)
        info = {
            "delta_sec": dsec,
            "cost": cost,
            "disrupt": disrupt,
            "attacker_action": atk,
            "plan": plan,
            "executed": executed,
        }
        return s_next, obs, float(reward), self.done, info

    def preview_defender(self, actions: JointAction, rng: np.random.Generator) -> WorldState:
        """Evaluation-only oracle: apply just the defender phase to a copy of
        the hidden state, without advancing the episode."""
        if self.state is None:
            raise RuntimeError("preview requires an active episode")
        plan, _ = execution_plan(actions)
        return apply_defender(self.graph, self.state, plan, self.scenario.action_params, rng)
