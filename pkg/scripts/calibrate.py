"""Calibration sweep for the acceptance thresholds (not part of the package)."""

import sys
import time

import numpy as np

from rlshield.agents import DefenderModel, TrainConfig, derive_seed, train
from rlshield.defense import default_playbook
from rlshield.evaluation import (
    EvalSettings,
    PlaybookPolicy,
    ShieldPolicy,
    asr,
    compute_run_metrics,
    rollout_many,
)
from rlshield.surface import FlowPools, default_scenario

BUDGET = int(sys.argv[1]) if len(sys.argv) > 1 else 60_000
SEEDS = 5
EPISODES = 200
MASTER = 2027

sc = default_scenario()
pools = FlowPools.synthetic(d=16, seed=derive_seed(MASTER, "pools"), rows=2000)
settings = EvalSettings(episodes=EPISODES)

results = {}
for variant in ("full", "no-entropy", "no-central-critic"):
    cfg = TrainConfig(step_budget=BUDGET).variant(variant)
    rows = []
    for i in range(SEEDS):
        seed = derive_seed(MASTER, "run", i)
        t0 = time.time()
        res = train(sc, cfg, seed, pools=pools)
        rets = np.array([r["return"] for r in res.log])
        k = max(1, len(rets) // 10)
        first, last = float(rets[:k].mean()), float(rets[-k:].mean())
        policy = ShieldPolicy(res.model)
        ep_seeds = [derive_seed(MASTER, "run", i, "test-ep", e) for e in range(EPISODES)]
        records, _ = rollout_many(sc, pools, policy, ep_seeds, settings)
        a = asr(records)
        rows.append((first, last, a))
        print(f"{variant} seed{i}: ret {first:.1f}->{last:.1f} ASR {a:.3f} ({time.time()-t0:.0f}s)",
              flush=True)
    results[variant] = rows

playbook_rows = []
for i in range(SEEDS):
    ep_seeds = [derive_seed(MASTER, "run", i, "test-ep", e) for e in range(EPISODES)]
    records, _ = rollout_many(sc, pools, PlaybookPolicy(default_playbook()), ep_seeds, settings)
    playbook_rows.append(asr(records))
print("playbook ASR per seed:", [round(a, 3) for a in playbook_rows], flush=True)

print("\n=== summary ===")
for variant, rows in results.items():
    asrs = [r[2] for r in rows]
    improved = sum(1 for f, l, _ in rows if l > f)
    print(f"{variant}: mean ASR {np.mean(asrs):.3f} per-seed {[round(a,3) for a in asrs]} "
          f"return-improved {improved}/5")
full = [r[2] for r in results["full"]]
noent = [r[2] for r in results["no-entropy"]]
nocc = [r[2] for r in results["no-central-critic"]]
print(f"full<=noent: {np.mean(full) <= np.mean(noent)}  full<=nocc: {np.mean(full) <= np.mean(nocc)}")
worst = sum(1 for i in range(SEEDS) if nocc[i] >= max(full[i], noent[i]))
print(f"no-cc worst in {worst}/5 seeds")
print(f"playbook mean {np.mean(playbook_rows):.3f}; rl<=0.85*playbook: "
      f"{np.mean(full) <= 0.85 * np.mean(playbook_rows)}")
