"""Episode rollouts, operational metrics and sweep/ablation aggregation.

Every metric is a pure function of persisted EpisodeRecords, so a report can
be recomputed bit-for-bit from the records file. Conventions the numbers
depend on (escalation mechanism, censoring, loss accounting) are emitted in
the report's ``definitions`` block so results are self-describing.

Escalations: a step escalates the nodes targeted by executed non-NoOp
actions, plus the highest-criticality alarmed node when the risk head clears
the report threshold. At most ``b_alert`` escalations per episode, enforced
at decision time, highest predicted risk first. An escalation is a true
positive iff the flagged node was non-clean when flagged.

Time metrics: TTD counts steps from first compromise to first true
escalation, TTR from first true escalation to containment (attacker frontier
empty). Undetected or uncontained episodes contribute the censored value
(horizon minus event step); undetected episodes censor TTR from the first
compromise.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import DefenderModel, belief_update, derive_seed, initial_belief, select_joint_action
from .defense import AuditTrail, GateRunner, RiskHead, SafetyGate, greedy_risk, orchestrate, static_playbook
from .errors import ConfigError, DataError
from .surface import (
    Action,
    ActionKind,
    AttackSurfaceEnv,
    FlowPools,
    JointAction,
    Observation,
    Scenario,
    goal_reached,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 300
    b_alert: int = 5
    impact_rate: float = 0.01
    exfil_penalty: float = 1.0
    report_threshold: float = 0.7
    greedy_samples: int = 32
    mode: str = "sample"

    def __post_init__(self):
        if self.episodes <= 0 or self.b_alert < 0:
            raise ConfigError("episodes must be positive and b_alert nonnegative")


@dataclass(frozen=True)
class Escalation:
    step: int
    node: int
    risk: float | None
    true_positive: bool


@dataclass(frozen=True)
class StepLog:
    levels: tuple[int, ...]          # hidden levels after this step
    executed: tuple[str, ...]        # per-agent executed actions, encoded
    delta_sec: float
    cost: float
    disrupt: float
    reward: float
    alarms: tuple[int, ...]          # alarmed nodes in the observation acted on
    escalations: tuple[Escalation, ...]


@dataclass
class EpisodeRecord:
    steps: list[StepLog]
    horizon: int
    w_persist: int
    seed: int
    exfiltrated: bool
    persistence: bool
    goal: bool
    first_compromise_step: int
    first_true_escalation_step: int | None
    containment_step: int | None

    def recomposed_rewards(self, w_s: float, w_c: float, w_d: float) -> list[float]:
        return [w_s * s.delta_sec - w_c * s.cost - w_d * s.disrupt for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "steps": [
                {
                    "levels": list(s.levels),
                    "executed": list(s.executed),
                    "delta_sec": s.delta_sec,
                    "cost": s.cost,
                    "disrupt": s.disrupt,
                    "reward": s.reward,
                    "alarms": list(s.alarms),
                    "escalations": [
                        {"step": e.step, "node": e.node, "risk": e.risk, "true_positive": e.true_positive}
                        for e in s.escalations
                    ],
                }
                for s in self.steps
            ],
            "horizon": self.horizon,
            "w_persist": self.w_persist,
            "seed": self.seed,
            "exfiltrated": self.exfiltrated,
            "persistence": self.persistence,
            "goal": self.goal,
            "first_compromise_step": self.first_compromise_step,
            "first_true_escalation_step": self.first_true_escalation_step,
            "containment_step": self.containment_step,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EpisodeRecord":
        steps = [
            StepLog(
                levels=tuple(s["levels"]),
                executed=tuple(s["executed"]),
                delta_sec=float(s["delta_sec"]),
                cost=float(s["cost"]),
                disrupt=float(s["disrupt"]),
                reward=float(s["reward"]),
                alarms=tuple(s["alarms"]),
                escalations=tuple(
                    Escalation(e["step"], e["node"], e["risk"], e["true_positive"]) for e in s["escalations"]
                ),
            )
            for s in raw["steps"]
        ]
        return cls(
            steps=steps,
            horizon=int(raw["horizon"]),
            w_persist=int(raw["w_persist"]),
            seed=int(raw["seed"]),
            exfiltrated=bool(raw["exfiltrated"]),
            persistence=bool(raw["persistence"]),
            goal=bool(raw["goal"]),
            first_compromise_step=int(raw["first_compromise_step"]),
            first_true_escalation_step=raw["first_true_escalation_step"],
            containment_step=raw["containment_step"],
        )


def write_records(path: str | Path, records: list[EpisodeRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[EpisodeRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(EpisodeRecord.from_dict(json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# policies under evaluation
# ---------------------------------------------------------------------------

class ShieldPolicy:
    """Learned multi-agent policy with its recurrent belief."""

    name = "rlshield"

    def __init__(self, model: DefenderModel, mode: str = "sample"):
        self.model = model
        self.mode = mode
        self.belief = initial_belief(model.belief_size)
        self.rng = np.random.default_rng(0)

    def reset(self, episode_seed: int) -> None:
        self.belief = initial_belief(self.model.belief_size)
        self.rng = np.random.default_rng(derive_seed(episode_seed, "policy"))

    def act(self, env: AttackSurfaceEnv, obs: Observation) -> tuple[JointAction, list[np.ndarray] | None, np.ndarray | None]:
        self.belief = belief_update(self.belief, obs, self.model.encoder)
        actions, _, probs = select_joint_action(self.belief, self.model, self.mode, self.rng)
        return actions, probs, self.belief.vector


class PlaybookPolicy:
    """Fixed-rule baseline; a pure function of the current observation."""

    name = "playbook"

    def __init__(self, rules):
        self.rules = rules

    def reset(self, episode_seed: int) -> None:
        pass

    def act(self, env: AttackSurfaceEnv, obs: Observation):
        return static_playbook(env.graph, obs, self.rules), None, None


class GreedyRiskPolicy:
    """Myopic oracle baseline; reads the hidden state through the simulator."""

    name = "greedy"

    def __init__(self, k_samples: int = 32):
        self.k_samples = k_samples
        self.rng = np.random.default_rng(0)

    def reset(self, episode_seed: int) -> None:
        self.rng = np.random.default_rng(derive_seed(episode_seed, "greedy"))

    def act(self, env: AttackSurfaceEnv, obs: Observation):
        return greedy_risk(env, self.k_samples, self.rng), None, None


def run_episode(
    scenario: Scenario,
    pools: FlowPools,
    policy,
    episode_seed: int,
    settings: EvalSettings,
    gate: SafetyGate | None = None,
    risk_head: RiskHead | None = None,
) -> tuple[EpisodeRecord, list[str]]:
    """Roll one evaluation episode; returns the record and its audit lines."""
    env = AttackSurfaceEnv(scenario, pools)
    state, obs = env.reset(episode_seed)
    policy.reset(episode_seed)

    trail = AuditTrail()
    runner = GateRunner(gate, env.graph, scenario.cost_table, trail) if gate is not None else None
    head = gate.risk_head if gate is not None else risk_head

    first_compromise = 0 if state.frontier else None
    budget = settings.b_alert
    steps: list[StepLog] = []
    containment: int | None = None
    first_true_escalation: int | None = None
    done = False
    t = 0

    while not done:
        pre_levels = env.state.levels.copy()
        obs_seen = obs
        proposed, probs, belief_vec = policy.act(env, obs)

        risk: float | None = None
        if runner is not None:
            gated, risk = runner.apply(t, proposed, belief_vec, probs)
        else:
            gated = proposed
            if head is not None and belief_vec is not None:
                risk = head.predict(belief_vec)
        plan, executed = orchestrate(gated, trail, t)

        state, obs, reward, done, info = env.step(gated)
        if first_compromise is None and state.frontier:
            first_compromise = t

        # escalation decisions under the per-episode alert budget
        targets = sorted({a.target for a in executed if a.kind is not ActionKind.NOOP})
        candidates: list[tuple[float, int]] = [(risk if risk is not None else 0.5, n) for n in targets]
        if head is not None and risk is not None and risk >= settings.report_threshold:
            alarmed = [n for n in range(env.graph.n_nodes) if obs_seen.alarms[n]]
            if alarmed:
                flag = min(alarmed, key=lambda n: (-env.graph.nodes[n].criticality, n))
                if flag not in targets:
                    candidates.append((risk, flag))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        escalations = []
        for cand_risk, node in candidates:
            if budget <= 0:
                break
            tp = bool(pre_levels[node] > 0)
            escalations.append(Escalation(step=t, node=node, risk=risk, true_positive=tp))
            budget -= 1
            if tp and first_true_escalation is None:
                first_true_escalation = t

        if containment is None and not state.frontier:
            containment = t

        steps.append(StepLog(
            levels=tuple(int(v) for v in state.levels),
            executed=tuple(a.encode() for a in executed),
            delta_sec=info["delta_sec"],
            cost=info["cost"],
            disrupt=info["disrupt"],
            reward=reward,
            alarms=tuple(int(n) for n in np.where(obs_seen.alarms)[0]),
            escalations=tuple(escalations),
        ))
        t += 1

    trace = np.array([s.levels for s in steps])
    persistence = goal_reached(trace, False, scenario.w_persist)
    record = EpisodeRecord(
        steps=steps,
        horizon=scenario.horizon,
        w_persist=scenario.w_persist,
        seed=episode_seed,
        exfiltrated=state.exfiltrated,
        persistence=persistence,
        goal=bool(state.exfiltrated or persistence),
        first_compromise_step=first_compromise if first_compromise is not None else 0,
        first_true_escalation_step=first_true_escalation,
        containment_step=containment,
    )
    return record, trail.lines


def rollout_many(
    scenario: Scenario,
    pools: FlowPools,
    policy,
    episode_seeds: list[int],
    settings: EvalSettings,
    gate: SafetyGate | None = None,
    risk_head: RiskHead | None = None,
    jobs: int = 1,
) -> tuple[list[EpisodeRecord], list[str]]:
    """Independent episodes; results identical for any jobs count."""
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        args = [(scenario, pools, policy, s, settings, gate, risk_head) for s in episode_seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_star, args))
    else:
        results = [run_episode(scenario, pools, policy, s, settings, gate, risk_head) for s in episode_seeds]
    records = [r for r, _ in results]
    audit_lines: list[str] = []
    for i, (_, lines) in enumerate(results):
        audit_lines.append(json.dumps({"type": "episode", "index": i, "seed": episode_seeds[i]}, sort_keys=True))
        audit_lines.extend(lines)
    return records, audit_lines


def _episode_star(args):
    return run_episode(*args)


def collect_validation_beliefs(
    scenario: Scenario,
    pools: FlowPools,
    model: DefenderModel,
    seeds: list[int],
    settings: EvalSettings,
) -> tuple[np.ndarray, np.ndarray]:
    """Ungated rollouts for gate fitting: per-step beliefs labeled with the
    episode's goal outcome."""
    beliefs: list[np.ndarray] = []
    labels: list[int] = []
    policy = ShieldPolicy(model, mode=settings.mode)
    for seed in seeds:
        env = AttackSurfaceEnv(scenario, pools)
        state, obs = env.reset(seed)
        policy.reset(seed)
        ep_beliefs: list[np.ndarray] = []
        trace = []
        done = False
        while not done:
            actions, _, belief_vec = policy.act(env, obs)
            ep_beliefs.append(belief_vec.copy())
            state, obs, _, done, _ = env.step(actions)
            trace.append(state.levels.copy())
        goal = goal_reached(np.array(trace), state.exfiltrated, scenario.w_persist)
        beliefs.extend(ep_beliefs)
        labels.extend([int(goal)] * len(ep_beliefs))
    return np.array(beliefs), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def asr(records: list[EpisodeRecord]) -> float:
    """Fraction of episodes whose attacker reached a goal."""
    if not records:
        raise DataError("asr needs at least one completed episode")
    return float(np.mean([r.goal for r in records]))


def expected_loss(records: list[EpisodeRecord], impact_rate: float = 0.01, exfil_penalty: float = 1.0) -> float:
    """Episode-mean of attack impact plus operational response cost."""
    totals = []
    for r in records:
        impact = impact_rate * sum(sum(s.levels) for s in r.steps)
        if r.exfiltrated:
            impact += exfil_penalty
        ops = sum(s.cost for s in r.steps)
        totals.append(impact + ops)
    return float(np.mean(totals)) if totals else 0.0


def disruption_cost(records: list[EpisodeRecord]) -> float:
    """Episode-mean accumulated disruption of the executed actions."""
    return float(np.mean([sum(s.disrupt for s in r.steps) for r in records])) if records else 0.0


def precision_at_budget(records: list[EpisodeRecord]) -> float | None:
    """Pooled TP/(TP+FP) over all escalations; None when nothing escalated."""
    tp = fp = 0
    for r in records:
        for s in r.steps:
            for e in s.escalations:
                tp += int(e.true_positive)
                fp += int(not e.true_positive)
    if tp + fp == 0:
        logger.warning("no escalations recorded; precision is undefined")
        return None
    return tp / (tp + fp)


def ttd_ttr(records: list[EpisodeRecord]) -> tuple[float, float]:
    """Mean steps compromise->detection and detection->containment, censored
    at the horizon for missing events."""
    ttds, ttrs = [], []
    for r in records:
        detect = r.first_true_escalation_step
        if detect is not None:
            ttds.append(detect - r.first_compromise_step)
            if r.containment_step is not None:
                ttrs.append(max(0, r.containment_step - detect))
            else:
                ttrs.append(r.horizon - detect)
        else:
            ttds.append(r.horizon - r.first_compromise_step)
            ttrs.append(r.horizon - r.first_compromise_step)
    return float(np.mean(ttds)), float(np.mean(ttrs))


def compute_run_metrics(records: list[EpisodeRecord], settings: EvalSettings) -> dict[str, float | None]:
    ttd, ttr = ttd_ttr(records)
    return {
        "asr": asr(records),
        "ttd": ttd,
        "ttr": ttr,
        "el": expected_loss(records, settings.impact_rate, settings.exfil_penalty),
        "dc": disruption_cost(records),
        "prec": precision_at_budget(records),
    }


METRIC_NAMES = ("asr", "ttd", "ttr", "el", "dc", "prec")


def metric_definitions(settings: EvalSettings) -> dict:
    return {
        "asr": "fraction of episodes with exfiltration or privileged persistence",
        "el": f"mean impact ({settings.impact_rate}/compromise-level/step, +{settings.exfil_penalty} on "
              "exfiltration) plus summed action cost",
        "dc": "mean summed criticality-scaled disruption of executed actions",
        "prec": f"pooled TP/(TP+FP) of escalations, budget {settings.b_alert}/episode, highest risk first; "
                "TP iff flagged node non-clean at flag time",
        "ttd": "mean steps from first compromise to first true escalation; horizon-censored",
        "ttr": "mean steps from first true escalation to empty attacker frontier; horizon-censored, "
               "measured from first compromise when never detected",
        "escalation": f"executed non-NoOp targets plus risk-head flag above {settings.report_threshold} "
                      "on the highest-criticality alarmed node",
    }


@dataclass
class MetricReport:
    """Mean +- sample std of each metric over seeds, plus provenance digests."""

    policy: str
    variant: str
    attacker: str
    seeds: list[int]
    episodes: int
    metrics: dict[str, dict]
    config_digest: str
    definitions: dict

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "variant": self.variant,
            "attacker": self.attacker,
            "seeds": self.seeds,
            "episodes": self.episodes,
            "metrics": self.metrics,
            "config_digest": self.config_digest,
            "definitions": self.definitions,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "MetricReport":
        raw = json.loads(Path(path).read_text())
        return cls(**{k: raw[k] for k in (
            "policy", "variant", "attacker", "seeds", "episodes", "metrics", "config_digest", "definitions")})


def summarize_metric(values: list[float | None]) -> dict:
    present = [v for v in values if v is not None]
    if not present:
        return {"mean": None, "std": None, "per_seed": values}
    mean = float(np.mean(present))
    std = float(np.std(present, ddof=1)) if len(present) > 1 else 0.0
    return {"mean": mean, "std": std, "per_seed": values}


def build_report(
    policy: str,
    variant: str,
    attacker: str,
    seeds: list[int],
    per_seed_metrics: list[dict[str, float | None]],
    episodes: int,
    settings: EvalSettings,
    config_digest: str,
) -> MetricReport:
    metrics = {
        name: summarize_metric([m[name] for m in per_seed_metrics]) for name in METRIC_NAMES
    }
    return MetricReport(
        policy=policy,
        variant=variant,
        attacker=attacker,
        seeds=list(seeds),
        episodes=episodes,
        metrics=metrics,
        config_digest=config_digest,
        definitions=metric_definitions(settings),
    )


def write_csv(path: str | Path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def sweep_rows(reports: list[MetricReport]) -> list[dict]:
    """Fig-2-style export: one row per (policy, attacker strength)."""
    rows = []
    for rep in sorted(reports, key=lambda r: (r.policy, r.variant, r.attacker)):
        rows.append({
            "policy": rep.policy,
            "variant": rep.variant,
            "attacker": rep.attacker,
            "asr_mean": rep.metrics["asr"]["mean"],
            "asr_std": rep.metrics["asr"]["std"],
            "el_mean": rep.metrics["el"]["mean"],
            "dc_mean": rep.metrics["dc"]["mean"],
            "prec_mean": rep.metrics["prec"]["mean"],
            "seeds": len(rep.seeds),
        })
    return rows


def ablation_rows(reports: list[MetricReport]) -> list[dict]:
    """Table-style export: ASR/EL/DC/Prec means per trained variant."""
    rows = []
    for rep in sorted(reports, key=lambda r: r.variant):
        rows.append({
            "variant": rep.variant,
            "asr": rep.metrics["asr"]["mean"],
            "el": rep.metrics["el"]["mean"],
            "dc": rep.metrics["dc"]["mean"],
            "prec": rep.metrics["prec"]["mean"],
        })
    return rows


def tradeoff_rows(reports: list[MetricReport]) -> list[dict]:
    """Fig-3-style export: one (EL, DC) point per policy."""
    rows = []
    for rep in sorted(reports, key=lambda r: (r.policy, r.variant)):
        rows.append({
            "policy": rep.policy,
            "variant": rep.variant,
            "el_mean": rep.metrics["el"]["mean"],
            "dc_mean": rep.metrics["dc"]["mean"],
        })
    return rows
