"""Command-line entry points: preprocess, train, evaluate, sweep, ablate, report.

Every command takes one YAML run config (--config). Outputs land under the
config's output_dir and embed the effective config digest; a rerun with the
same config file and master seed reproduces every artifact byte-for-byte.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .agents import DefenderModel, derive_seed, train
from .config import RunConfig, load_column_schema, load_run_config
from .defense import SafetyGate, check_gate_soundness, default_playbook, fit_risk_head
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import (
    GreedyRiskPolicy,
    MetricReport,
    PlaybookPolicy,
    ShieldPolicy,
    ablation_rows,
    build_report,
    compute_run_metrics,
    collect_validation_beliefs,
    rollout_many,
    sweep_rows,
    tradeoff_rows,
    write_csv,
    write_records,
)
from .flowdata import (
    SPLIT_TRAIN,
    Dataset,
    SplitSpec,
    default_split_spec,
    fit_stats,
    load_flow_csv,
    synth_flows,
    time_split,
    transform,
    write_manifest,
)
from .surface import AttackerStrength, FlowPools

VARIANT_OF_POLICY = {"rlshield": "full", "independent": "no-central-critic"}
LEARNED_POLICIES = tuple(VARIANT_OF_POLICY)
ALL_VARIANTS = ("full", "no-entropy", "no-game-reg", "no-central-critic")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1, not argparse's 2
        raise ConfigError(message)


def _ensure_clear(path: Path, overwrite: bool) -> None:
    exists = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if exists:
        if not overwrite:
            raise ConfigError(f"output {path} already exists; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _run_seed(cfg: RunConfig, run_index: int) -> int:
    return derive_seed(cfg.master_seed, "run", run_index)


def _build_dataset(cfg: RunConfig) -> tuple[Dataset, SplitSpec]:
    if cfg.dataset.uses_csv():
        ds = load_flow_csv(cfg.dataset.csv, load_column_schema(cfg))
    else:
        ds = synth_flows(cfg.dataset.synth, derive_seed(cfg.master_seed, "flow-synth"))
    if cfg.dataset.t_tr is not None and cfg.dataset.t_va is not None:
        spec = SplitSpec(t_tr=float(cfg.dataset.t_tr), t_va=float(cfg.dataset.t_va))
    else:
        spec = default_split_spec(ds, cfg.dataset.train_frac, cfg.dataset.val_frac)
    return time_split(ds, spec), spec


def _preprocess_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "preprocess"


def _load_pools(cfg: RunConfig) -> FlowPools:
    """Pools from the preprocess feature store when present, else the generator."""
    pdir = _preprocess_dir(cfg)
    if (pdir / "features.npy").exists():
        features = np.load(pdir / "features.npy")
        y = np.load(pdir / "y.npy")
        splits = np.load(pdir / "splits.npy")
        mask = splits == SPLIT_TRAIN
        benign = features[mask & (y == 0)]
        attack = features[mask & (y == 1)]
        return FlowPools(benign=benign, attack=attack)
    ds, _ = _build_dataset(cfg)
    stats = fit_stats(ds)
    return FlowPools.from_dataset(transform(ds, stats))


def cmd_preprocess(cfg: RunConfig, args) -> int:
    out = _preprocess_dir(cfg)
    _ensure_clear(out, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)

    ds, spec = _build_dataset(cfg)
    stats = fit_stats(ds)
    transformed = transform(ds, stats)

    write_manifest(out / "manifest.json", transformed, spec, stats, cfg.digest())
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    np.save(out / "features.npy", transformed.features)
    np.save(out / "y.npy", transformed.y)
    np.save(out / "splits.npy", transformed.splits)
    np.save(out / "timestamps.npy", transformed.timestamps)
    meta = {
        "config_digest": cfg.digest(),
        "stats_digest": stats.digest(),
        "d": transformed.d,
        "rows": transformed.n,
        "counts": transformed.split_counts(),
        "feature_names": list(transformed.feature_names),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"preprocess: {transformed.n} rows, d={transformed.d}, splits {transformed.split_counts()}")
    print(f"preprocess: outputs in {out}")
    return 0


def _requested_variants(cfg: RunConfig, args) -> list[str]:
    if getattr(args, "ablation", None):
        if args.ablation == "all":
            return list(ALL_VARIANTS)
        return [args.ablation]
    variants = ["full"]
    if "independent" in cfg.policies:
        variants.append("no-central-critic")
    return variants


def cmd_train(cfg: RunConfig, args) -> int:
    pools = _load_pools(cfg)
    base_train = cfg.train
    if args.budget is not None:
        base_train = replace(base_train, step_budget=args.budget)

    for variant in _requested_variants(cfg, args):
        tconf = base_train.variant(variant)
        for i in range(tconf.seeds):
            run_dir = cfg.output_dir / "train" / variant / f"seed{i}"
            _ensure_clear(run_dir, args.overwrite)
            run_dir.mkdir(parents=True, exist_ok=True)
            seed = _run_seed(cfg, i)
            result = train(
                cfg.scenario,
                tconf,
                seed,
                pools=pools,
                checkpoint_on_divergence=run_dir / "diverged.ckpt",
            )
            meta = {
                "variant": variant,
                "run_index": i,
                "seed": seed,
                "config_digest": cfg.digest(),
                "env_steps": result.env_steps,
                "episodes": len(result.log),
                "beta": tconf.beta,
                "lam": tconf.lam,
                "central_critic": tconf.central_critic,
                "step_budget": tconf.step_budget,
            }
            result.model.save(run_dir / "checkpoint.ckpt", extra_meta=meta)
            result.write_log(run_dir / "train_log.jsonl")
            (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
            last = result.log[-1]["return"] if result.log else float("nan")
            print(f"train[{variant} seed{i}]: {result.env_steps} steps, "
                  f"{len(result.log)} episodes, last return {last:.3f}")
    return 0


def _strengths(args, cfg: RunConfig) -> list[str]:
    choice = getattr(args, "attacker", None) or "scenario"
    if choice == "scenario":
        return [cfg.scenario.attacker.strength.value]
    if choice == "all":
        return [s.value for s in AttackerStrength]
    return [choice]


def _eval_policies(cfg: RunConfig, args) -> list[str]:
    if getattr(args, "policy", None):
        return [args.policy]
    return list(cfg.policies)


def _fit_gate(cfg: RunConfig, scenario, pools, model, run_index: int, strength: str) -> tuple[SafetyGate, dict]:
    settings = cfg.eval_settings
    val_seeds = [derive_seed(cfg.master_seed, "run", run_index, "val-ep", strength, e)
                 for e in range(cfg.gate.val_episodes)]
    beliefs, labels = collect_validation_beliefs(scenario, pools, model, val_seeds, settings)
    head, tau = fit_risk_head(beliefs, labels, cfg.gate.fpr_cap)
    gate = SafetyGate(risk_head=head, tau_gate=tau, d_max=cfg.gate.d_max,
                      cooldown_steps=cfg.gate.cooldown_steps)
    neg = beliefs[labels == 0]
    val_fpr = float(np.mean(head.predict_batch(neg) >= tau)) if len(neg) else 0.0
    info = {"tau_gate": tau, "val_false_trigger_rate": val_fpr,
            "val_positives": int(labels.sum()), "val_steps": int(len(labels))}
    return gate, info


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pools = _load_pools(cfg)
    settings = cfg.eval_settings
    if args.episodes is not None:
        settings = replace(settings, episodes=args.episodes)
    use_gate = cfg.gate.enabled and not args.no_gate

    for strength in _strengths(args, cfg):
        scenario = cfg.scenario.with_attacker(strength)
        for policy_name in _eval_policies(cfg, args):
            out = cfg.output_dir / "eval" / policy_name / strength
            _ensure_clear(out, args.overwrite)
            out.mkdir(parents=True, exist_ok=True)

            per_seed_metrics = []
            seeds = []
            for i in range(cfg.train.seeds):
                run_seed = _run_seed(cfg, i)
                seeds.append(run_seed)
                gate = None
                gate_info = {"gated": False}
                if policy_name in LEARNED_POLICIES:
                    variant = VARIANT_OF_POLICY[policy_name]
                    ckpt = cfg.output_dir / "train" / variant / f"seed{i}" / "checkpoint.ckpt"
                    if not ckpt.exists():
                        raise DataError(
                            f"missing checkpoint {ckpt}; run `rlshield train` "
                            f"{'--ablation ' + variant if variant != 'full' else ''} first"
                        )
                    tconf = cfg.train.variant(variant)
                    model = DefenderModel.load(ckpt, scenario.graph, pools.d, tconf)
                    if use_gate:
                        gate, gate_info = _fit_gate(cfg, scenario, pools, model, i, strength)
                        gate_info["gated"] = True
                    policy = ShieldPolicy(model, mode=settings.mode)
                elif policy_name == "playbook":
                    policy = PlaybookPolicy(default_playbook())
                elif policy_name == "greedy":
                    policy = GreedyRiskPolicy(settings.greedy_samples)
                else:
                    raise ConfigError(f"unknown policy {policy_name!r}")

                ep_seeds = [derive_seed(cfg.master_seed, "run", i, "test-ep", strength, e)
                            for e in range(settings.episodes)]
                records, audit = rollout_many(
                    scenario, pools, policy, ep_seeds, settings, gate=gate, jobs=args.jobs)
                write_records(out / f"seed{i}_records.jsonl", records)
                (out / f"seed{i}_audit.jsonl").write_text("\n".join(audit) + ("\n" if audit else ""))
                if gate is not None:
                    payload = {"gate": gate.to_dict(), "fit": gate_info}
                    violations = check_gate_soundness(audit, gate, scenario.cost_table)
                    payload["soundness_violations"] = len(violations)
                    (out / f"seed{i}_gate.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
                per_seed_metrics.append(compute_run_metrics(records, settings))

            report = build_report(
                policy=policy_name,
                variant=VARIANT_OF_POLICY.get(policy_name, "-"),
                attacker=strength,
                seeds=seeds,
                per_seed_metrics=per_seed_metrics,
                episodes=settings.episodes,
                settings=settings,
                config_digest=cfg.digest(),
            )
            report.write(out / "report.json")
            asr_mean = report.metrics["asr"]["mean"]
            print(f"evaluate[{policy_name} vs {strength}]: ASR {asr_mean:.3f} over "
                  f"{len(seeds)} seeds x {settings.episodes} episodes")
    return 0


def cmd_eval_variants(cfg: RunConfig, args) -> int:
    """Evaluate every trained ablation variant against the scenario attacker."""
    pools = _load_pools(cfg)
    settings = cfg.eval_settings
    if args.episodes is not None:
        settings = replace(settings, episodes=args.episodes)
    strength = cfg.scenario.attacker.strength.value
    scenario = cfg.scenario
    use_gate = cfg.gate.enabled and not args.no_gate

    for variant in ALL_VARIANTS:
        vdir = cfg.output_dir / "train" / variant
        if not vdir.exists():
            raise DataError(f"variant {variant!r} not trained; run `rlshield train --ablation all` first")
        out = cfg.output_dir / "eval-variants" / variant
        _ensure_clear(out, args.overwrite)
        out.mkdir(parents=True, exist_ok=True)
        tconf = cfg.train.variant(variant)
        per_seed_metrics = []
        seeds = []
        for i in range(tconf.seeds):
            seeds.append(_run_seed(cfg, i))
            ckpt = vdir / f"seed{i}" / "checkpoint.ckpt"
            if not ckpt.exists():
                raise DataError(f"missing checkpoint {ckpt}")
            model = DefenderModel.load(ckpt, scenario.graph, pools.d, tconf)
            gate = None
            if use_gate:
                gate, _ = _fit_gate(cfg, scenario, pools, model, i, f"variant-{variant}")
            policy = ShieldPolicy(model, mode=settings.mode)
            ep_seeds = [derive_seed(cfg.master_seed, "run", i, "test-ep", f"variant-{variant}", e)
                        for e in range(settings.episodes)]
            records, audit = rollout_many(scenario, pools, policy, ep_seeds, settings, gate=gate, jobs=args.jobs)
            write_records(out / f"seed{i}_records.jsonl", records)
            (out / f"seed{i}_audit.jsonl").write_text("\n".join(audit) + ("\n" if audit else ""))
            per_seed_metrics.append(compute_run_metrics(records, settings))
        report = build_report(
            policy="rlshield", variant=variant, attacker=strength, seeds=seeds,
            per_seed_metrics=per_seed_metrics, episodes=settings.episodes,
            settings=settings, config_digest=cfg.digest(),
        )
        report.write(out / "report.json")
        print(f"evaluate-variants[{variant}]: ASR {report.metrics['asr']['mean']:.3f}")
    return 0


def _collect_reports(root: Path) -> list[MetricReport]:
    return [MetricReport.from_file(p) for p in sorted(root.glob("*/*/report.json"))]


def cmd_sweep(cfg: RunConfig, args) -> int:
    reports = _collect_reports(cfg.output_dir / "eval")
    if not reports:
        raise DataError(f"no evaluation reports under {cfg.output_dir / 'eval'}; run `rlshield evaluate` first")
    rows = sweep_rows(reports)
    write_csv(cfg.output_dir / "sweep.csv", rows, list(rows[0].keys()))
    (cfg.output_dir / "sweep.json").write_text(
        json.dumps({"config_digest": cfg.digest(), "rows": rows}, indent=2, sort_keys=True) + "\n")
    print(f"sweep: {len(rows)} rows -> {cfg.output_dir / 'sweep.csv'}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    root = cfg.output_dir / "eval-variants"
    reports = [MetricReport.from_file(p) for p in sorted(root.glob("*/report.json"))]
    if not reports:
        raise DataError(f"no variant reports under {root}; run `rlshield evaluate-variants` first")
    rows = ablation_rows(reports)
    write_csv(cfg.output_dir / "ablation.csv", rows, list(rows[0].keys()))
    (cfg.output_dir / "ablation.json").write_text(
        json.dumps({"config_digest": cfg.digest(), "rows": rows}, indent=2, sort_keys=True) + "\n")
    print(f"ablate: {len(rows)} variants -> {cfg.output_dir / 'ablation.csv'}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    eval_reports = _collect_reports(cfg.output_dir / "eval")
    variant_reports = [MetricReport.from_file(p)
                       for p in sorted((cfg.output_dir / "eval-variants").glob("*/report.json"))]
    if not eval_reports and not variant_reports:
        raise DataError("nothing to report; run `rlshield evaluate` first")
    scenario_strength = cfg.scenario.attacker.strength.value
    base = [r for r in eval_reports if r.attacker == scenario_strength] or eval_reports
    rows = tradeoff_rows(base)
    write_csv(cfg.output_dir / "el_dc.csv", rows, list(rows[0].keys()))
    summary = {
        "config_digest": cfg.digest(),
        "master_seed": cfg.master_seed,
        "seeds": [_run_seed(cfg, i) for i in range(cfg.train.seeds)],
        "reports": [r.to_dict() for r in eval_reports + variant_reports],
    }
    (cfg.output_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"report: {len(summary['reports'])} reports -> {cfg.output_dir / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlshield", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("--jobs", type=int, default=1, help="parallel episode rollouts")

    p = sub.add_parser("preprocess", help="build the split manifest, stats and feature store")
    common(p)

    p = sub.add_parser("train", help="train defense policies under the step budget")
    common(p)
    p.add_argument("--budget", type=int, default=None, help="override the environment-step budget")
    p.add_argument("--ablation", choices=[*ALL_VARIANTS, "all"], default=None,
                   help="train an ablation variant instead of the defaults")

    p = sub.add_parser("evaluate", help="fit the gate on validation seeds, run held-out episodes")
    common(p)
    p.add_argument("--episodes", type=int, default=None, help="override held-out episode count")
    p.add_argument("--attacker", choices=["basic", "skilled", "adaptive", "scenario", "all"],
                   default="scenario")
    p.add_argument("--policy", choices=["rlshield", "independent", "playbook", "greedy"], default=None,
                   help="evaluate a single policy instead of the configured list")
    p.add_argument("--no-gate", action="store_true", help="disable the safety gate")

    p = sub.add_parser("evaluate-variants", help="evaluate the trained ablation variants")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--no-gate", action="store_true")

    for name, help_text in (
        ("sweep", "attacker-strength table from existing evaluations"),
        ("ablate", "ablation table from existing variant evaluations"),
        ("report", "combined report and EL-DC trade-off export"),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "evaluate-variants": cmd_eval_variants,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.master_seed = args.seed
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, nn.NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
