"""Baseline policies, runtime safety gate, response orchestration, audit trail.

The gate sits between whatever proposes actions and the environment: actions
whose kind is classified high-disruption (base disruption above d_max) only
pass when the predicted episode risk clears a validation-tuned threshold;
re-proposals of a recently executed (kind, target) pair hit a cooldown.
Every decision is appended to the audit trail, so gate soundness is checkable
from the trail alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from sklearn.linear_model import LogisticRegression

from .errors import ConfigError, DataError
from .surface import (
    Action,
    ActionKind,
    AssetGraph,
    AttackSurfaceEnv,
    CostTable,
    JointAction,
    NOOP,
    NodeKind,
    Observation,
    agent_action_space,
    delta_sec,
    execution_plan,
)

logger = logging.getLogger(__name__)


class GateError(DataError):
    """Risk head cannot be fitted or used."""


@dataclass(frozen=True)
class PlaybookRule:
    """Fixed trigger -> action template, evaluated on the current observation only.

    Triggers: ``alarm`` (flag required), ``min_criticality``, ``node_kind``.
    The action template's target is the triggering node.
    """

    priority: int
    action_kind: ActionKind
    alarm: bool = True
    min_criticality: float = 0.0
    node_kind: NodeKind | None = None

    def matches(self, graph: AssetGraph, obs: Observation, node: int) -> bool:
        if self.alarm and not obs.alarms[node]:
            return False
        asset = graph.nodes[node]
        if asset.criticality < self.min_criticality:
            return False
        if self.node_kind is not None and asset.kind is not self.node_kind:
            return False
        return True


def default_playbook() -> list[PlaybookRule]:
    """Isolate alarmed high-criticality assets, block the rest."""
    return [
        PlaybookRule(priority=100, action_kind=ActionKind.ISOLATE_HOST, min_criticality=0.7),
        PlaybookRule(priority=10, action_kind=ActionKind.BLOCK_SOURCE),
    ]


def load_playbook(path: str | Path) -> list[PlaybookRule]:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{path}: playbook file must hold a nonempty rule list")
    rules = []
    for entry in raw:
        rules.append(PlaybookRule(
            priority=int(entry["priority"]),
            action_kind=ActionKind[entry["action"]],
            alarm=bool(entry.get("alarm", True)),
            min_criticality=float(entry.get("min_criticality", 0.0)),
            node_kind=NodeKind(entry["node_kind"]) if entry.get("node_kind") else None,
        ))
    return rules


def static_playbook(graph: AssetGraph, obs: Observation, rules: list[PlaybookRule]) -> JointAction:
    """Per agent scope: highest-priority matching rule wins; NoOp otherwise.

    Pure function of the current observation (plus the static rule set and
    graph); within one priority the lowest node index wins.
    """
    if not rules:
        raise ConfigError("static_playbook needs a nonempty rule set")
    ordered = sorted(rules, key=lambda r: -r.priority)
    actions: list[Action] = []
    for scope in graph.agent_scopes:
        chosen = NOOP
        for rule in ordered:
            hits = [n for n in sorted(scope) if rule.matches(graph, obs, n)]
            if hits:
                chosen = Action(rule.action_kind, hits[0])
                break
        actions.append(chosen)
    return tuple(actions)


def greedy_risk(env: AttackSurfaceEnv, k_samples: int, rng: np.random.Generator) -> JointAction:
    """Myopic baseline with oracle simulator access (evaluation-only).

    Per agent, pick the action with the best K-sample Monte Carlo estimate of
    the one-step defender-phase gain w_s*dSec - w_c*Cost - w_d*Disrupt (other
    agents held at NoOp). NoOp scores exactly zero; ties resolve to the lowest
    action index.
    """
    if k_samples <= 0:
        raise ConfigError("greedy_risk needs a positive sample count")
    sc = env.scenario
    graph = env.graph
    actions: list[Action] = []
    for agent in range(graph.n_agents):
        space = agent_action_space(graph, agent)
        best_idx, best_score = 0, 0.0  # index 0 is NoOp with exact score 0
        for idx, cand in enumerate(space[1:], start=1):
            joint = tuple(cand if i == agent else NOOP for i in range(graph.n_agents))
            plan, _ = execution_plan(joint)
            gain = 0.0
            for _ in range(k_samples):
                s_mid = env.preview_defender(joint, rng)
                gain += delta_sec(env.state, s_mid)
            gain /= k_samples
            score = (sc.reward_weights.w_s * gain
                     - sc.reward_weights.w_c * sc.cost_table.plan_cost(plan)
                     - sc.reward_weights.w_d * sc.cost_table.plan_disrupt(plan, graph))
            if score > best_score:
                best_idx, best_score = idx, score
        actions.append(space[best_idx])
    return tuple(actions)


@dataclass
class RiskHead:
    """Logistic map from the belief vector to attack-success probability."""

    coef: np.ndarray
    intercept: float

    def predict(self, belief_vec: np.ndarray) -> float:
        z = float(belief_vec @ self.coef + self.intercept)
        if z >= 0:
            return float(1.0 / (1.0 + np.exp(-z)))
        e = float(np.exp(z))
        return e / (1.0 + e)

    def predict_batch(self, beliefs: np.ndarray) -> np.ndarray:
        z = beliefs @ self.coef + self.intercept
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept}

    @classmethod
    def from_dict(cls, raw: dict) -> "RiskHead":
        return cls(coef=np.asarray(raw["coef"], dtype=np.float64), intercept=float(raw["intercept"]))


def fit_risk_head(
    beliefs: np.ndarray,
    step_labels: np.ndarray,
    fpr_cap: float = 0.05,
) -> tuple[RiskHead, float]:
    """Fit the gate's risk head and pick its threshold on validation episodes.

    ``step_labels`` carries each belief's episode outcome (goal reached or
    not). Training weights the attack class by the benign/attack count ratio.
    The threshold is the smallest candidate (taken from the positive steps'
    predicted risks) that keeps the high-disruption false-trigger rate on
    negative steps at or below ``fpr_cap``.
    """
    y = np.asarray(step_labels).astype(int)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise GateError(
            f"risk head needs both outcomes among validation episodes (got {n_pos} positive, {n_neg} negative)"
        )
    w_pos = n_neg / n_pos
    clf = LogisticRegression(class_weight={0: 1.0, 1: w_pos}, max_iter=2000)
    clf.fit(np.asarray(beliefs, dtype=np.float64), y)
    head = RiskHead(coef=clf.coef_[0].astype(np.float64), intercept=float(clf.intercept_[0]))

    risks = head.predict_batch(np.asarray(beliefs, dtype=np.float64))
    neg_risks = risks[y == 0]
    candidates = np.unique(risks[y == 1])
    tau = 1.0
    for cand in candidates:  # ascending; smallest threshold meeting the cap
        rate = float(np.mean(neg_risks >= cand))
        if rate <= fpr_cap:
            tau = float(cand)
            break
    return head, tau


@dataclass
class SafetyGate:
    """Runtime action filter: risk-thresholded high-disruption gating + cooldowns."""

    risk_head: RiskHead
    tau_gate: float
    d_max: float
    cooldown_steps: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau_gate <= 1.0:
            raise GateError("tau_gate must lie in [0, 1]")
        if self.cooldown_steps < 0:
            raise GateError("cooldown must be nonnegative")

    def is_high_disruption(self, kind: ActionKind, costs: CostTable) -> bool:
        return costs.disrupt[kind] > self.d_max

    def to_dict(self) -> dict:
        return {
            "risk_head": self.risk_head.to_dict(),
            "tau_gate": self.tau_gate,
            "d_max": self.d_max,
            "cooldown_steps": self.cooldown_steps,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SafetyGate":
        return cls(
            risk_head=RiskHead.from_dict(raw["risk_head"]),
            tau_gate=float(raw["tau_gate"]),
            d_max=float(raw["d_max"]),
            cooldown_steps=int(raw["cooldown_steps"]),
        )


# Default d_max sits between ThrottleService (0.15) and ResetCredentials (0.2)
# base disruption, making Reset/Isolate/Recover the high-disruption kinds.
DEFAULT_D_MAX = 0.175


@dataclass(frozen=True)
class AuditEntry:
    """One gate decision; executed differs from proposed only on intervention."""

    step: int
    agent: int
    proposed: str
    executed: str
    verdict: str        # pass | gated | cooldown | dedup
    risk: float | None
    cost: float
    disruption: float
    reason: str

    def to_json(self) -> str:
        return json.dumps({
            "type": "decision",
            "step": self.step,
            "agent": self.agent,
            "proposed": self.proposed,
            "executed": self.executed,
            "verdict": self.verdict,
            "risk": self.risk,
            "cost": self.cost,
            "disruption": self.disruption,
            "reason": self.reason,
        }, sort_keys=True)


class AuditTrail:
    """Append-only decision log; one JSON line per entry."""

    def __init__(self):
        self.entries: list[AuditEntry] = []
        self.lines: list[str] = []

    def record(self, entry: AuditEntry) -> None:
        self.entries.append(entry)
        self.lines.append(entry.to_json())

    def record_raw(self, payload: dict) -> None:
        self.lines.append(json.dumps(payload, sort_keys=True))

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines) + ("\n" if self.lines else ""))


class GateRunner:
    """Applies the safety gate within one episode, tracking cooldowns.

    Cooldown bookkeeping is per (action kind, target): an executed pair cannot
    run again for ``cooldown_steps`` steps. A risk-gated high-disruption action
    is substituted by the agent's most probable allowed action when policy
    probabilities are available, else NoOp.
    """

    def __init__(self, gate: SafetyGate, graph: AssetGraph, costs: CostTable, trail: AuditTrail):
        self.gate = gate
        self.graph = graph
        self.costs = costs
        self.trail = trail
        self._last_run: dict[tuple[int, int], int] = {}

    def reset(self) -> None:
        self._last_run.clear()

    def _in_cooldown(self, action: Action, step: int) -> bool:
        if action.kind is ActionKind.NOOP:
            return False
        key = (int(action.kind), action.target)
        last = self._last_run.get(key)
        return last is not None and step - last < self.gate.cooldown_steps

    def _best_allowed(self, agent: int, probs: np.ndarray | None, step: int) -> Action:
        if probs is None:
            return NOOP
        space = agent_action_space(self.graph, agent)
        order = np.argsort(-np.asarray(probs))
        for idx in order:
            cand = space[int(idx)]
            if self.gate.is_high_disruption(cand.kind, self.costs):
                continue
            if self._in_cooldown(cand, step):
                continue
            return cand
        return NOOP

    def apply(
        self,
        step: int,
        proposed: JointAction,
        belief_vec: np.ndarray | None,
        probs: list[np.ndarray] | None = None,
    ) -> tuple[JointAction, float | None]:
        """Gate one joint action; returns (executed joint action, predicted risk).

        Duplicate (kind, target) survivors are demoted here too, so every
        audit entry's ``executed`` matches what the environment will apply."""
        risk = None
        if belief_vec is not None:
            risk = self.gate.risk_head.predict(belief_vec)
        gated: list[Action] = []
        verdicts: list[tuple[str, str]] = []
        for agent, action in enumerate(proposed):
            executed = action
            verdict, reason = "pass", "allowed"
            if self._in_cooldown(action, step):
                executed, verdict, reason = NOOP, "cooldown", "cooldown"
            elif (
                action.kind is not ActionKind.NOOP
                and self.gate.is_high_disruption(action.kind, self.costs)
                and (risk is None or risk < self.gate.tau_gate)
            ):
                executed = self._best_allowed(agent, probs[agent] if probs else None, step)
                verdict, reason = "gated", "gated: risk below threshold"
            gated.append(executed)
            verdicts.append((verdict, reason))

        _, executed_joint = execution_plan(tuple(gated))
        for agent, action in enumerate(proposed):
            executed = executed_joint[agent]
            verdict, reason = verdicts[agent]
            if executed != gated[agent]:
                verdict, reason = "dedup", "deduplicated by orchestrator"
            crit = self.graph.nodes[executed.target].criticality if executed.target is not None else 0.0
            self.trail.record(AuditEntry(
                step=step,
                agent=agent,
                proposed=action.encode(),
                executed=executed.encode(),
                verdict=verdict,
                risk=risk,
                cost=self.costs.cost[executed.kind],
                disruption=self.costs.disrupt[executed.kind] * crit,
                reason=reason,
            ))
        for action in executed_joint:
            if action.kind is not ActionKind.NOOP:
                self._last_run[(int(action.kind), action.target)] = step
        return tuple(executed_joint), risk


def orchestrate(gated: JointAction, trail: AuditTrail | None = None, step: int | None = None) -> tuple[list[Action], JointAction]:
    """Order the gated joint action into executable response steps.

    Containment (isolate, block) runs before credential resets, throttling,
    rule deployment and recovery; duplicate (kind, target) proposals collapse
    to one step and the duplicate agents are demoted to NoOp. The plan order
    lands in the audit trail when one is supplied.
    """
    plan, executed = execution_plan(gated)
    if trail is not None:
        trail.record_raw({"type": "plan", "step": step, "order": [a.encode() for a in plan]})
    return plan, tuple(executed)


def check_gate_soundness(lines: list[str], gate: SafetyGate, costs: CostTable) -> list[dict]:
    """Scan an audit trail for executed high-disruption actions below threshold.

    Returns the violating decision records (empty list = sound)."""
    violations = []
    for line in lines:
        rec = json.loads(line)
        if rec.get("type") != "decision":
            continue
        executed = Action.decode(rec["executed"])
        if executed.kind is ActionKind.NOOP:
            continue
        if gate.is_high_disruption(executed.kind, costs):
            risk = rec.get("risk")
            if risk is None or risk < gate.tau_gate:
                violations.append(rec)
    return violations
