"""Acceptance suite: formula oracles, invariants and trend reproduction.

Each criterion prints one `ACCEPTANCE n (<name>): PASS/FAIL` line (run with
`pytest tests/test_acceptance.py -s` to watch them). The heavy criteria share
one set of trained runs: 3 variants x 5 seeds at a fixed environment-step
budget on the default 12-asset scenario, evaluated on held-out episode seeds.
"""

import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from rlshield import autodiff as ad
from rlshield.agents import TrainConfig, derive_seed, train
from rlshield.autodiff import Tensor
from rlshield.cli import main as cli_main
from rlshield.defense import check_gate_soundness, default_playbook, fit_risk_head, greedy_risk, SafetyGate, DEFAULT_D_MAX
from rlshield.evaluation import (
    EvalSettings,
    PlaybookPolicy,
    ShieldPolicy,
    asr,
    collect_validation_beliefs,
    compute_run_metrics,
    rollout_many,
)
from rlshield.flowdata import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
    SynthConfig,
    default_split_spec,
    fit_stats,
    synth_flows,
    time_split,
    transform,
)
from rlshield.nn import BeliefEncoderParams, DenseNetParams, gru_step
from rlshield.surface import (
    ActionParams,
    AttackSurfaceEnv,
    FlowPools,
    NOOP,
    agent_action_space,
    apply_defender,
    chain_scenario,
    default_scenario,
    delta_sec,
    execution_plan,
)

MASTER = 2027
SEEDS = 5
TRAIN_BUDGET = 60_000  # well under the 200k cap
EVAL_EPISODES = 300
VARIANTS = ("full", "no-entropy", "no-central-critic")
STRENGTHS = ("basic", "skilled", "adaptive")


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num} ({name}): {status}" + (f" [{detail}]" if detail else ""))


# ---------------------------------------------------------------------------
# 1. preprocessing oracle suite
# ---------------------------------------------------------------------------

def test_criterion_1_preprocessing_oracles():
    t0 = time.monotonic()
    ds = synth_flows(SynthConfig(d=12, rows=1000, missing_rate=0.04, inf_rate=0.02), seed=31)
    spec = default_split_spec(ds)
    ds = time_split(ds, spec)

    # exact split membership against the raw inequalities
    ok_split = True
    for i in range(ds.n):
        t = ds.timestamps[i]
        want = SPLIT_TRAIN if t <= spec.t_tr else (SPLIT_VAL if t <= spec.t_va else SPLIT_TEST)
        ok_split &= int(ds.splits[i]) == want

    stats = fit_stats(ds)

    # brute-force recomputation with python loops
    train_rows = [i for i in range(ds.n) if ds.splits[i] == SPLIT_TRAIN]
    finite_cols = [
        [ds.features[i, j] for i in train_rows if math.isfinite(ds.features[i, j])]
        for j in range(ds.d)
    ]
    medians = [statistics.median(c) for c in finite_cols]
    log_set = tuple(j for j in range(ds.d) if min(finite_cols[j]) >= 0)
    logged = []
    for i in train_rows:
        row = []
        for j in range(ds.d):
            v = ds.features[i, j]
            v = v if math.isfinite(v) else medians[j]
            if j in log_set and v >= 0:
                v = math.log1p(v)
            row.append(v)
        logged.append(row)
    means = [sum(r[j] for r in logged) / len(logged) for j in range(ds.d)]
    stds = [math.sqrt(sum((r[j] - means[j]) ** 2 for r in logged) / len(logged)) for j in range(ds.d)]
    pos = sum(1 for i in train_rows if ds.y[i] == 1)
    neg = len(train_rows) - pos
    w_plus = neg / pos

    err = max(
        max(abs(stats.medians[j] - medians[j]) for j in range(ds.d)),
        max(abs(stats.means[j] - means[j]) for j in range(ds.d)),
        max(abs(stats.stds[j] - stds[j]) for j in range(ds.d)),
        abs(stats.pos_weight - w_plus),
    )
    ok_stats = stats.log_set == log_set and err <= 1e-9

    # binarization against the indicator
    ok_labels = all(int(ds.y[i]) == int(str(ds.labels_raw[i]).strip().lower() != "benign")
                    for i in range(ds.n))

    # leakage: deleting val/test rows leaves every fitted statistic unchanged
    train_only = ds.subset(ds.split_mask(SPLIT_TRAIN))
    stats2 = fit_stats(train_only)
    ok_leak = (
        np.array_equal(stats.medians, stats2.medians)
        and np.array_equal(stats.means, stats2.means)
        and np.array_equal(stats.stds, stats2.stds)
        and stats.log_set == stats2.log_set
        and stats.pos_weight == stats2.pos_weight
    )

    # transformed output is finite everywhere
    out = transform(ds, stats)
    ok_total = bool(np.all(np.isfinite(out.features)))

    elapsed = time.monotonic() - t0
    ok = ok_split and ok_stats and ok_labels and ok_leak and ok_total and elapsed < 10.0
    report(1, "preprocessing oracle suite", ok,
           f"max|delta|={err:.2e}, split exact={ok_split}, leakage clean={ok_leak}, {elapsed:.1f}s")
    assert ok_split and ok_stats and ok_labels and ok_leak and ok_total
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. gradient correctness
# ---------------------------------------------------------------------------

def _random_net_loss(rng):
    """Random MLP + GRU configuration returning a scalar-loss closure."""
    obs_dim = int(rng.integers(3, 7))
    enc_dim = int(rng.integers(2, 5))
    hidden = int(rng.integers(2, 6))
    widths = [hidden] + [int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3)))] + [int(rng.integers(2, 5))]
    enc = BeliefEncoderParams.create(rng, obs_dim, enc_dim, hidden)
    net = DenseNetParams.create(rng, widths, "net")
    obs_seq = [rng.normal(size=obs_dim) for _ in range(3)]
    target = rng.normal(size=widths[-1])
    picks = rng.integers(0, widths[-1], size=1)

    params = enc.parameters() + net.parameters()

    def loss_fn():
        h = Tensor(np.zeros(hidden))
        for o in obs_seq:
            x = ad.tanh(ad.add(ad.matmul(Tensor(o), enc.psi.weight), enc.psi.bias))
            h = gru_step(enc.gru, h, x)
        logits = net.forward(h)
        logp = ad.log_softmax_rows(logits)
        p = ad.exp(logp)
        mse = ad.tmean(ad.square(ad.sub(logits, Tensor(target))))
        ent = ad.tmean(ad.mul(ad.tsum(ad.mul(p, logp)), -1.0))
        pick = ad.tsum(ad.gather_rows(ad.log_softmax_rows(ad.stack_rows([logits])), picks))
        return ad.add(ad.add(mse, ad.mul(ent, 0.5)), ad.mul(pick, 0.25))

    return params, loss_fn


def test_criterion_2_gradient_correctness():
    t0 = time.monotonic()
    rng = np.random.default_rng(404)
    eps = 1e-5
    worst = 0.0
    n_configs = 100
    for _ in range(n_configs):
        params, loss_fn = _random_net_loss(rng)
        loss = loss_fn()
        for p in params:
            p.zero_grad()
        ad.backward(loss)
        grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
        for p, g in zip(params, grads):
            flat = p.data.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                an = g.ravel()[i]
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                worst = max(worst, rel)
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-4 and elapsed < 120.0
    report(2, "gradient correctness", ok,
           f"{n_configs} configs, worst rel err {worst:.2e}, {elapsed:.0f}s")
    assert worst <= 1e-4
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 3. reward and metric accounting
# ---------------------------------------------------------------------------

class RandomPolicy:
    name = "random"

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.spaces = None

    def reset(self, episode_seed):
        self.rng = np.random.default_rng(derive_seed(episode_seed, "random-policy"))

    def act(self, env, obs):
        if self.spaces is None:
            self.spaces = [agent_action_space(env.graph, i) for i in range(env.graph.n_agents)]
        ja = tuple(s[int(self.rng.integers(len(s)))] for s in self.spaces)
        return ja, None, None


def test_criterion_3_reward_and_metric_accounting():
    sc = default_scenario()
    pools = FlowPools.synthetic(d=8, seed=derive_seed(MASTER, "c3-pools"), rows=800)
    settings = EvalSettings(episodes=50, b_alert=5)
    seeds = [derive_seed(MASTER, "c3-ep", e) for e in range(50)]
    records, _ = rollout_many(sc, pools, RandomPolicy(), seeds, settings)

    w = sc.reward_weights
    ok_reward = all(
        s.reward == w.w_s * s.delta_sec - w.w_c * s.cost - w.w_d * s.disrupt
        for r in records for s in r.steps
    )

    # telescoping: per-episode sum of delta_sec equals (initial - final mass)/(3|V|)
    ok_tel = True
    for r in records:
        total = sum(s.delta_sec for s in r.steps)
        final_mass = sum(r.steps[-1].levels)
        ok_tel &= abs(total - (1 - final_mass) / (3.0 * 12)) <= 1e-12

    got = compute_run_metrics(records, settings)

    # hand-rolled loop oracles
    goals = sum(1 for r in records if r.goal)
    oracle_asr = goals / len(records)
    el_total = 0.0
    for r in records:
        impact = sum(settings.impact_rate * sum(s.levels) for s in r.steps)
        if r.exfiltrated:
            impact += settings.exfil_penalty
        el_total += impact + sum(s.cost for s in r.steps)
    oracle_el = el_total / len(records)
    oracle_dc = sum(sum(s.disrupt for s in r.steps) for r in records) / len(records)
    tp = sum(1 for r in records for s in r.steps for e in s.escalations if e.true_positive)
    fp = sum(1 for r in records for s in r.steps for e in s.escalations if not e.true_positive)
    oracle_prec = tp / (tp + fp) if tp + fp else None

    errs = [abs(got["asr"] - oracle_asr), abs(got["el"] - oracle_el), abs(got["dc"] - oracle_dc)]
    if oracle_prec is None:
        ok_prec = got["prec"] is None
    else:
        ok_prec = got["prec"] is not None and abs(got["prec"] - oracle_prec) <= 1e-12
    ok = ok_reward and ok_tel and max(errs) <= 1e-12 and ok_prec
    report(3, "reward/metric accounting", ok,
           f"50 episodes, reward exact={ok_reward}, telescoping={ok_tel}, metric err<={max(errs):.1e}")
    assert ok_reward and ok_tel and ok_prec
    assert max(errs) <= 1e-12


# ---------------------------------------------------------------------------
# shared trained runs for criteria 4-7
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lab():
    sc = default_scenario()
    pools = FlowPools.synthetic(d=16, seed=derive_seed(MASTER, "pools"), rows=2000)
    settings = EvalSettings(episodes=EVAL_EPISODES)

    trained = {v: [] for v in VARIANTS}
    for variant in VARIANTS:
        cfg = TrainConfig(step_budget=TRAIN_BUDGET).variant(variant)
        for i in range(SEEDS):
            trained[variant].append(train(sc, cfg, derive_seed(MASTER, "run", i), pools=pools))

    def fit_gate(model, run_index, strength):
        scenario = sc.with_attacker(strength)
        val_seeds = [derive_seed(MASTER, "run", run_index, "val-ep", strength, e) for e in range(40)]
        beliefs, labels = collect_validation_beliefs(scenario, pools, model, val_seeds, settings)
        head, tau = fit_risk_head(beliefs, labels, fpr_cap=0.05)
        gate = SafetyGate(risk_head=head, tau_gate=tau, d_max=DEFAULT_D_MAX, cooldown_steps=4)
        neg = beliefs[labels == 0]
        val_fpr = float(np.mean(head.predict_batch(neg) >= tau)) if len(neg) else 0.0
        return gate, val_fpr

    # evaluation grid: ASR per (policy, strength, seed); audit trails kept for the gate check
    grid: dict[tuple[str, str], list[float]] = {}
    audits: list[tuple[SafetyGate, list[str]]] = []
    val_fprs: list[float] = []
    for strength in STRENGTHS:
        scenario = sc.with_attacker(strength)
        for policy_name, variant in (("rlshield", "full"), ("independent", "no-central-critic")):
            per_seed = []
            for i in range(SEEDS):
                model = trained[variant][i].model
                gate, val_fpr = fit_gate(model, i, strength)
                ep_seeds = [derive_seed(MASTER, "run", i, "test-ep", strength, e)
                            for e in range(EVAL_EPISODES)]
                records, audit = rollout_many(scenario, pools, ShieldPolicy(model), ep_seeds,
                                              settings, gate=gate)
                per_seed.append(asr(records))
                audits.append((gate, audit))
                val_fprs.append(val_fpr)
            grid[(policy_name, strength)] = per_seed
        per_seed = []
        for i in range(SEEDS):
            ep_seeds = [derive_seed(MASTER, "run", i, "test-ep", strength, e)
                        for e in range(EVAL_EPISODES)]
            records, _ = rollout_many(scenario, pools, PlaybookPolicy(default_playbook()),
                                      ep_seeds, settings)
            per_seed.append(asr(records))
        grid[("playbook", strength)] = per_seed

    return {
        "scenario": sc,
        "pools": pools,
        "settings": settings,
        "trained": trained,
        "grid": grid,
        "audits": audits,
        "val_fprs": val_fprs,
    }


def test_criterion_4_learning_progress(lab):
    improved = 0
    gains = []
    for res in lab["trained"]["full"]:
        rets = np.array([r["return"] for r in res.log])
        k = max(1, len(rets) // 10)
        first, last = float(rets[:k].mean()), float(rets[-k:].mean())
        gains.append((first, last))
        improved += int(last > first)

    rl = float(np.mean(lab["grid"][("rlshield", "basic")]))
    pb = float(np.mean(lab["grid"][("playbook", "basic")]))
    ok_return = improved >= 4
    ok_asr = rl <= 0.85 * pb
    ok = ok_return and ok_asr
    report(4, "learning progress", ok,
           f"return improved {improved}/5 seeds; ASR rl={rl:.3f} vs playbook={pb:.3f} "
           f"(need <= {0.85 * pb:.3f})")
    assert ok_return, f"final-decile return must beat first decile in >=4/5 seeds: {gains}"
    assert ok_asr, f"rl ASR {rl:.3f} not 15% below playbook {pb:.3f}"


def test_criterion_5_ablation_ordering(lab):
    sc, pools, settings = lab["scenario"], lab["pools"], lab["settings"]
    per_variant = {}
    for variant in VARIANTS:
        if variant == "full":
            per_variant[variant] = lab["grid"][("rlshield", "basic")]
        elif variant == "no-central-critic":
            per_variant[variant] = lab["grid"][("independent", "basic")]
        else:
            per_seed = []
            for i in range(SEEDS):
                model = lab["trained"][variant][i].model
                ep_seeds = [derive_seed(MASTER, "run", i, "test-ep", "basic", e)
                            for e in range(EVAL_EPISODES)]
                records, _ = rollout_many(sc, pools, ShieldPolicy(model), ep_seeds, settings)
                per_seed.append(asr(records))
            per_variant[variant] = per_seed

    full = per_variant["full"]
    noent = per_variant["no-entropy"]
    nocc = per_variant["no-central-critic"]
    ok_means = np.mean(full) <= np.mean(noent) and np.mean(full) <= np.mean(nocc)
    worst_count = sum(1 for i in range(SEEDS) if nocc[i] >= max(full[i], noent[i]))
    ok = ok_means and worst_count >= 3
    report(5, "ablation ordering", ok,
           f"mean ASR full={np.mean(full):.3f} no-entropy={np.mean(noent):.3f} "
           f"no-central-critic={np.mean(nocc):.3f}; no-cc worst in {worst_count}/5 seeds")
    assert ok_means
    assert worst_count >= 3


def test_criterion_6_attacker_strength_trend(lab):
    grid = lab["grid"]
    ok = True
    details = []
    for policy in ("rlshield", "independent", "playbook"):
        means = []
        ses = []
        for strength in STRENGTHS:
            vals = grid[(policy, strength)]
            means.append(float(np.mean(vals)))
            ses.append(float(np.std(vals, ddof=1) / np.sqrt(len(vals))))
        for a, b in ((0, 1), (1, 2)):
            drop = means[a] - means[b]
            allowed = math.sqrt(ses[a] ** 2 + ses[b] ** 2)
            if drop > allowed:
                ok = False
        details.append(f"{policy}: " + "->".join(f"{m:.3f}" for m in means))
    report(6, "attacker-strength trend", ok, "; ".join(details))
    assert ok, details


def test_criterion_7_gate_soundness(lab):
    sc = lab["scenario"]
    violations = 0
    for gate, audit in lab["audits"]:
        violations += len(check_gate_soundness(audit, gate, sc.cost_table))
    max_fpr = max(lab["val_fprs"])
    ok = violations == 0 and max_fpr <= 0.05
    report(7, "gate soundness", ok,
           f"{len(lab['audits'])} trails, {violations} violations, worst val FPR {max_fpr:.3f}")
    assert violations == 0
    assert max_fpr <= 0.05


# ---------------------------------------------------------------------------
# 8. end-to-end determinism
# ---------------------------------------------------------------------------

def test_criterion_8_cli_determinism(tmp_path):
    config = """\
name: determinism
output_dir: {out}
master_seed: 5
scenario: default
dataset:
  synth: {{d: 6, rows: 400, attack_fraction: 0.3}}
train: {{step_budget: 600, window: 8, seeds: 2}}
gate: {{val_episodes: 30}}
eval: {{episodes: 4}}
policies: [rlshield, playbook]
"""

    def digest_tree(root: Path):
        import hashlib

        return {
            str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()
        }

    trees = []
    for sub in ("one", "two"):
        cfg = tmp_path / f"{sub}.yaml"
        cfg.write_text(config.format(out=tmp_path / sub))
        assert cli_main(["preprocess", "--config", str(cfg)]) == 0
        assert cli_main(["train", "--config", str(cfg)]) == 0
        assert cli_main(["evaluate", "--config", str(cfg)]) == 0
        trees.append(digest_tree(tmp_path / sub))
    ok = trees[0] == trees[1]
    report(8, "end-to-end determinism", ok, f"{len(trees[0])} artifacts compared")
    assert ok


# ---------------------------------------------------------------------------
# 9. greedy-risk equivalence on the 3-node chain
# ---------------------------------------------------------------------------

def test_criterion_9_greedy_equals_brute_force():
    from dataclasses import replace
    from conftest import make_state

    sc = replace(chain_scenario(3), action_params=ActionParams(reset_success=1.0, recover_success=1.0))
    pools = FlowPools.synthetic(d=6, seed=1, rows=400)
    env = AttackSurfaceEnv(sc, pools)
    env.reset(0)

    def brute_force(state):
        best = []
        for agent in range(sc.graph.n_agents):
            space = agent_action_space(sc.graph, agent)
            best_idx, best_score = 0, 0.0
            for idx, cand in enumerate(space[1:], start=1):
                joint = tuple(cand if i == agent else NOOP for i in range(sc.graph.n_agents))
                plan, _ = execution_plan(joint)
                s_mid = apply_defender(sc.graph, state, plan, sc.action_params, np.random.default_rng(0))
                score = (sc.reward_weights.w_s * delta_sec(state, s_mid)
                         - sc.reward_weights.w_c * sc.cost_table.plan_cost(plan)
                         - sc.reward_weights.w_d * sc.cost_table.plan_disrupt(plan, sc.graph))
                if score > best_score:
                    best_idx, best_score = idx, score
            best.append(space[best_idx])
        return tuple(best)

    checked = 0
    mismatches = []
    for l0 in range(4):
        for l1 in range(4):
            for l2 in range(4):
                for iso in (None, 0, 2):
                    levels = [l0, l1, l2]
                    isolated = np.zeros(3, dtype=bool)
                    if iso is not None:
                        isolated[iso] = True
                    state = make_state(levels, isolated=isolated)
                    env.state = state
                    env.done = False
                    mc = greedy_risk(env, k_samples=512, rng=np.random.default_rng(7))
                    exact = brute_force(state)
                    checked += 1
                    if mc != exact:
                        mismatches.append((levels, iso, mc, exact))
    ok = not mismatches
    report(9, "greedy-risk equivalence", ok, f"{checked} states checked, {len(mismatches)} mismatches")
    assert ok, mismatches[:3]
