"""Playbook, greedy baseline, risk head, safety gate, orchestration, audit."""

import json
from dataclasses import replace

import numpy as np
import pytest

from rlshield.defense import (
    DEFAULT_D_MAX,
    AuditTrail,
    GateError,
    GateRunner,
    PlaybookRule,
    RiskHead,
    SafetyGate,
    check_gate_soundness,
    default_playbook,
    fit_risk_head,
    greedy_risk,
    load_playbook,
    orchestrate,
    static_playbook,
)
from rlshield.errors import ConfigError
from rlshield.surface import (
    CLEAN,
    FOOTHOLD,
    PRIVILEGED,
    STAGED,
    Action,
    ActionKind,
    ActionParams,
    AttackSurfaceEnv,
    NOOP,
    Observation,
    chain_scenario,
    default_cost_table,
    default_scenario,
    delta_sec,
)
from conftest import make_state


@pytest.fixture(scope="module")
def pools(shared_pools):
    return shared_pools


def obs_with_alarms(n_nodes, alarmed, d=6):
    alarms = np.zeros(n_nodes, dtype=bool)
    alarms[list(alarmed)] = True
    return Observation(features=np.zeros((n_nodes, d)), alarms=alarms, delays=np.zeros(n_nodes, dtype=np.int64))


# ---------------------------------------------------------------------------
# static playbook
# ---------------------------------------------------------------------------

def test_playbook_no_alarms_all_noop():
    sc = default_scenario()
    ja = static_playbook(sc.graph, obs_with_alarms(12, []), default_playbook())
    assert all(a == NOOP for a in ja)


def test_playbook_high_severity_isolates():
    sc = default_scenario()
    # node 8 is the criticality-1.0 service in agent 2's scope
    ja = static_playbook(sc.graph, obs_with_alarms(12, [8]), default_playbook())
    assert ja[2] == Action(ActionKind.ISOLATE_HOST, 8)


def test_playbook_low_criticality_blocks():
    sc = default_scenario()
    ja = static_playbook(sc.graph, obs_with_alarms(12, [0]), default_playbook())
    assert ja[0] == Action(ActionKind.BLOCK_SOURCE, 0)


def test_playbook_priority_wins():
    sc = default_scenario()
    rules = [
        PlaybookRule(priority=1, action_kind=ActionKind.BLOCK_SOURCE),
        PlaybookRule(priority=9, action_kind=ActionKind.THROTTLE_SERVICE),
    ]
    ja = static_playbook(sc.graph, obs_with_alarms(12, [0]), rules)
    assert ja[0].kind is ActionKind.THROTTLE_SERVICE


def test_playbook_is_pure_function_of_observation():
    sc = default_scenario()
    obs = obs_with_alarms(12, [3, 8])
    rules = default_playbook()
    first = static_playbook(sc.graph, obs, rules)
    for _ in range(5):
        assert static_playbook(sc.graph, obs, rules) == first


def test_playbook_rules_file_roundtrip(tmp_path):
    p = tmp_path / "rules.yaml"
    p.write_text(
        "- {priority: 100, action: ISOLATE_HOST, min_criticality: 0.7}\n"
        "- {priority: 10, action: BLOCK_SOURCE}\n"
    )
    rules = load_playbook(p)
    assert rules[0].action_kind is ActionKind.ISOLATE_HOST
    assert rules[0].min_criticality == 0.7


def test_playbook_empty_file_rejected(tmp_path):
    p = tmp_path / "rules.yaml"
    p.write_text("[]\n")
    with pytest.raises(ConfigError):
        load_playbook(p)


def test_playbook_empty_rules_rejected():
    sc = default_scenario()
    with pytest.raises(ConfigError):
        static_playbook(sc.graph, obs_with_alarms(12, []), [])


# ---------------------------------------------------------------------------
# greedy risk
# ---------------------------------------------------------------------------

def test_greedy_picks_single_improving_action(pools):
    sc = replace(chain_scenario(2), action_params=ActionParams(recover_success=1.0, reset_success=1.0))
    env = AttackSurfaceEnv(sc, pools)
    env.reset(0)
    env.state = make_state([FOOTHOLD, CLEAN])
    ja = greedy_risk(env, k_samples=8, rng=np.random.default_rng(0))
    assert ja[0] == Action(ActionKind.RECOVER, 0)


def test_greedy_noop_when_nothing_improves(pools):
    sc = chain_scenario(2)
    env = AttackSurfaceEnv(sc, pools)
    env.reset(0)
    env.state = make_state([CLEAN, CLEAN])  # nothing to defend
    ja = greedy_risk(env, k_samples=8, rng=np.random.default_rng(0))
    assert ja[0] == NOOP


def test_greedy_k_must_be_positive(pools):
    sc = chain_scenario(2)
    env = AttackSurfaceEnv(sc, pools)
    env.reset(0)
    with pytest.raises(ConfigError):
        greedy_risk(env, k_samples=0, rng=np.random.default_rng(0))


def brute_force_one_step(env, state):
    """Exact expectation over the (deterministic) defender phase."""
    sc = env.scenario
    from rlshield.surface import agent_action_space, execution_plan, apply_defender

    best = []
    for agent in range(env.graph.n_agents):
        space = agent_action_space(env.graph, agent)
        best_idx, best_score = 0, 0.0
        for idx, cand in enumerate(space[1:], start=1):
            joint = tuple(cand if i == agent else NOOP for i in range(env.graph.n_agents))
            plan, _ = execution_plan(joint)
            s_mid = apply_defender(env.graph, state, plan, sc.action_params, np.random.default_rng(0))
            score = (sc.reward_weights.w_s * delta_sec(state, s_mid)
                     - sc.reward_weights.w_c * sc.cost_table.plan_cost(plan)
                     - sc.reward_weights.w_d * sc.cost_table.plan_disrupt(plan, env.graph))
            if score > best_score:
                best_idx, best_score = idx, score
        best.append(space[best_idx])
    return tuple(best)


def test_greedy_two_node_chain_matches_exact_enumeration(pools):
    sc = replace(chain_scenario(2), action_params=ActionParams(recover_success=1.0, reset_success=1.0))
    env = AttackSurfaceEnv(sc, pools)
    env.reset(0)
    for levels in ([FOOTHOLD, CLEAN], [PRIVILEGED, FOOTHOLD], [STAGED, PRIVILEGED], [CLEAN, STAGED]):
        env.state = make_state(levels)
        mc = greedy_risk(env, k_samples=10_000, rng=np.random.default_rng(1))
        exact = brute_force_one_step(env, env.state)
        assert mc == exact, f"levels {levels}: MC {mc} != exact {exact}"


# ---------------------------------------------------------------------------
# risk head
# ---------------------------------------------------------------------------

def test_risk_head_separable_beliefs_zero_false_trigger():
    rng = np.random.default_rng(0)
    neg = rng.normal(loc=-2.0, scale=0.3, size=(200, 4))
    pos = rng.normal(loc=2.0, scale=0.3, size=(200, 4))
    beliefs = np.vstack([neg, pos])
    labels = np.array([0] * 200 + [1] * 200)
    head, tau = fit_risk_head(beliefs, labels, fpr_cap=0.05)
    neg_risks = head.predict_batch(neg)
    assert float(np.mean(neg_risks >= tau)) == 0.0


def test_risk_head_degenerate_labels_rejected():
    beliefs = np.random.default_rng(0).normal(size=(50, 3))
    with pytest.raises(GateError):
        fit_risk_head(beliefs, np.zeros(50, dtype=int))
    with pytest.raises(GateError):
        fit_risk_head(beliefs, np.ones(50, dtype=int))


def test_risk_head_threshold_near_known_optimum():
    """Beliefs from a true logistic model; the 5%-FPR threshold computed from
    the true risks is the oracle the fitted threshold must approach."""
    rng = np.random.default_rng(42)
    b = rng.normal(size=(6000, 1))
    true_risk = 1.0 / (1.0 + np.exp(-3.0 * b[:, 0]))
    y = (rng.random(6000) < true_risk).astype(int)
    if y.sum() == 0 or y.sum() == len(y):
        pytest.skip("degenerate draw")
    oracle_tau = float(np.quantile(true_risk[y == 0], 0.95))
    head, tau = fit_risk_head(b, y, fpr_cap=0.05)
    assert abs(tau - oracle_tau) < 0.05


def test_risk_head_serialization_roundtrip():
    head = RiskHead(coef=np.array([0.5, -1.0]), intercept=0.25)
    again = RiskHead.from_dict(head.to_dict())
    np.testing.assert_array_equal(again.coef, head.coef)
    x = np.array([0.3, 0.7])
    assert head.predict(x) == again.predict(x)
    assert 0.0 < head.predict(x) < 1.0


# ---------------------------------------------------------------------------
# safety gate
# ---------------------------------------------------------------------------

def constant_gate(risk_value, tau=0.5, cooldown=4):
    # a head that always predicts risk_value: zero coefficients, logit(intercept)
    logit = np.log(risk_value / (1.0 - risk_value))
    return SafetyGate(
        risk_head=RiskHead(coef=np.zeros(4), intercept=float(logit)),
        tau_gate=tau,
        d_max=DEFAULT_D_MAX,
        cooldown_steps=cooldown,
    )


def make_runner(gate):
    sc = default_scenario()
    trail = AuditTrail()
    return GateRunner(gate, sc.graph, sc.cost_table, trail), trail, sc


def noop_joint(n=4):
    return tuple(NOOP for _ in range(n))


def test_gate_low_disruption_passes_any_risk():
    runner, trail, sc = make_runner(constant_gate(0.01))
    proposed = (Action(ActionKind.DEPLOY_RULE, 0), NOOP, NOOP, NOOP)
    gated, risk = runner.apply(0, proposed, np.zeros(4))
    assert gated == proposed
    assert trail.entries[0].verdict == "pass"


def test_gate_blocks_high_disruption_below_threshold():
    runner, trail, sc = make_runner(constant_gate(0.1, tau=0.5))
    proposed = (Action(ActionKind.ISOLATE_HOST, 0), NOOP, NOOP, NOOP)
    gated, risk = runner.apply(0, proposed, np.zeros(4))
    assert gated[0] == NOOP  # no policy probs -> substitute NoOp
    entry = trail.entries[0]
    assert entry.verdict == "gated"
    assert entry.reason == "gated: risk below threshold"
    assert entry.proposed != entry.executed


def test_gate_allows_high_disruption_above_threshold():
    runner, trail, sc = make_runner(constant_gate(0.9, tau=0.5))
    proposed = (Action(ActionKind.ISOLATE_HOST, 0), NOOP, NOOP, NOOP)
    gated, _ = runner.apply(0, proposed, np.zeros(4))
    assert gated[0].kind is ActionKind.ISOLATE_HOST


def test_gate_substitutes_best_allowed_by_policy_probability():
    runner, trail, sc = make_runner(constant_gate(0.1, tau=0.5))
    from rlshield.surface import agent_action_space

    space = agent_action_space(sc.graph, 0)
    probs = np.zeros(len(space))
    probs[space.index(Action(ActionKind.RECOVER, 0))] = 0.6   # high-disruption, not allowed
    probs[space.index(Action(ActionKind.BLOCK_SOURCE, 1))] = 0.3  # best allowed
    proposed = (Action(ActionKind.RECOVER, 0), NOOP, NOOP, NOOP)
    gated, _ = runner.apply(0, proposed, np.zeros(4), [probs, None, None, None])
    assert gated[0] == Action(ActionKind.BLOCK_SOURCE, 1)


def test_gate_cooldown_forces_noop():
    runner, trail, sc = make_runner(constant_gate(0.9, tau=0.5, cooldown=4))
    proposed = (Action(ActionKind.ISOLATE_HOST, 0), NOOP, NOOP, NOOP)
    g1, _ = runner.apply(0, proposed, np.zeros(4))
    assert g1[0].kind is ActionKind.ISOLATE_HOST
    g2, _ = runner.apply(1, proposed, np.zeros(4))
    assert g2[0] == NOOP
    assert trail.entries[4].verdict == "cooldown"
    g3, _ = runner.apply(5, proposed, np.zeros(4))  # cooldown expired
    assert g3[0].kind is ActionKind.ISOLATE_HOST


def test_gate_soundness_checker_flags_violations():
    gate = constant_gate(0.9, tau=0.5)
    table = default_cost_table()
    ok_line = json.dumps({
        "type": "decision", "step": 0, "agent": 0, "proposed": "IsolateHost:1",
        "executed": "ISOLATE_HOST:1", "verdict": "pass", "risk": 0.9,
        "cost": 0.3, "disruption": 0.5, "reason": "allowed",
    })
    bad_line = json.dumps({
        "type": "decision", "step": 1, "agent": 0, "proposed": "ISOLATE_HOST:1",
        "executed": "ISOLATE_HOST:1", "verdict": "pass", "risk": 0.2,
        "cost": 0.3, "disruption": 0.5, "reason": "allowed",
    })
    violations = check_gate_soundness([bad_line], gate, table)
    assert len(violations) == 1
    assert check_gate_soundness(
        [json.dumps({"type": "decision", "step": 0, "agent": 0, "proposed": "NoOp",
                     "executed": "NoOp", "verdict": "pass", "risk": 0.0,
                     "cost": 0.0, "disruption": 0.0, "reason": "allowed"})], gate, table) == []


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def test_orchestrate_containment_before_rules():
    ja = (Action(ActionKind.DEPLOY_RULE, 0), Action(ActionKind.ISOLATE_HOST, 3), NOOP, NOOP)
    plan, executed = orchestrate(ja)
    assert plan[0].kind is ActionKind.ISOLATE_HOST
    assert plan[1].kind is ActionKind.DEPLOY_RULE


def test_orchestrate_dedups_same_target():
    ja = (Action(ActionKind.ISOLATE_HOST, 3), Action(ActionKind.ISOLATE_HOST, 3), NOOP, NOOP)
    plan, executed = orchestrate(ja)
    assert len(plan) == 1
    assert executed[1] == NOOP


def test_orchestrate_all_noop_empty_plan():
    plan, executed = orchestrate(noop_joint())
    assert plan == []


def test_orchestrate_records_plan_in_trail():
    trail = AuditTrail()
    ja = (Action(ActionKind.RECOVER, 2), Action(ActionKind.BLOCK_SOURCE, 5), NOOP, NOOP)
    plan, _ = orchestrate(ja, trail, step=7)
    rec = json.loads(trail.lines[-1])
    assert rec["type"] == "plan" and rec["step"] == 7
    assert rec["order"] == ["BLOCK_SOURCE:5", "RECOVER:2"]


def test_audit_entries_in_bijection_with_executed_actions(pools):
    """Non-NoOp executed actions in the audit equal the env's applied plan."""
    sc = default_scenario()
    env = AttackSurfaceEnv(sc, pools)
    env.reset(3)
    gate = constant_gate(0.9, tau=0.5, cooldown=2)
    trail = AuditTrail()
    runner = GateRunner(gate, sc.graph, sc.cost_table, trail)
    rng = np.random.default_rng(0)
    from rlshield.surface import agent_action_space

    for t in range(10):
        proposed = tuple(agent_action_space(sc.graph, i)[rng.integers(19)] for i in range(4))
        gated, _ = runner.apply(t, proposed, np.zeros(4))
        plan, executed = orchestrate(gated, trail, t)
        _, _, _, done, info = env.step(gated)
        audit_executed = sorted(
            e.executed for e in trail.entries if e.step == t and e.executed != "NoOp"
        )
        # dedup demotions: executed-in-audit must match the applied plan exactly
        assert sorted(a.encode() for a in info["plan"]) == sorted(
            a.encode() for a in executed if a != NOOP
        )
        assert audit_executed == sorted(a.encode() for a in gated if a != NOOP)
        if done:
            break
