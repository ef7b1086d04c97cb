"""Run configuration: one YAML file per run, no environment variables.

The effective configuration (after CLI overrides) is hashed into a digest
that every output artifact embeds, and the master seed expands into named
per-component seed streams so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agents import TrainConfig
from .defense import DEFAULT_D_MAX
from .errors import ConfigError
from .evaluation import EvalSettings
from .flowdata import ColumnSchema, SynthConfig
from .surface import Scenario, chain_scenario, default_scenario

DEFAULT_POLICIES = ("rlshield", "independent", "playbook", "greedy")


@dataclass(frozen=True)
class GateConfig:
    enabled: bool = True
    d_max: float = DEFAULT_D_MAX
    cooldown_steps: int = 4
    fpr_cap: float = 0.05
    val_episodes: int = 40

    def __post_init__(self):
        if not 0.0 <= self.fpr_cap <= 1.0:
            raise ConfigError("gate fpr_cap must lie in [0, 1]")
        if self.val_episodes <= 0:
            raise ConfigError("gate needs at least one validation episode")


@dataclass(frozen=True)
class DatasetConfig:
    """Where flow features come from: a CSV + column map, or the generator."""

    csv: Path | None = None
    schema: Path | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    t_tr: float | None = None
    t_va: float | None = None
    train_frac: float = 0.6
    val_frac: float = 0.2

    def uses_csv(self) -> bool:
        return self.csv is not None


@dataclass
class RunConfig:
    name: str
    output_dir: Path
    master_seed: int
    scenario: Scenario
    scenario_ref: str
    dataset: DatasetConfig
    train: TrainConfig
    gate: GateConfig
    eval_settings: EvalSettings
    policies: tuple[str, ...] = DEFAULT_POLICIES

    def effective_dict(self) -> dict:
        return {
            "name": self.name,
            "master_seed": self.master_seed,
            "scenario": self.scenario.to_dict(),
            "dataset": {
                "csv": str(self.dataset.csv) if self.dataset.csv else None,
                "schema": str(self.dataset.schema) if self.dataset.schema else None,
                "synth": {
                    "d": self.dataset.synth.d,
                    "rows": self.dataset.synth.rows,
                    "attack_fraction": self.dataset.synth.attack_fraction,
                    "missing_rate": self.dataset.synth.missing_rate,
                    "inf_rate": self.dataset.synth.inf_rate,
                },
                "t_tr": self.dataset.t_tr,
                "t_va": self.dataset.t_va,
                "train_frac": self.dataset.train_frac,
                "val_frac": self.dataset.val_frac,
            },
            "train": {
                "gamma": self.train.gamma,
                "beta": self.train.beta,
                "lam": self.train.lam,
                "lr": self.train.lr,
                "tau": self.train.tau,
                "step_budget": self.train.step_budget,
                "window": self.train.window,
                "belief_size": self.train.belief_size,
                "encoder_size": self.train.encoder_size,
                "hidden": list(self.train.hidden),
                "central_critic": self.train.central_critic,
                "seeds": self.train.seeds,
            },
            "gate": {
                "enabled": self.gate.enabled,
                "d_max": self.gate.d_max,
                "cooldown_steps": self.gate.cooldown_steps,
                "fpr_cap": self.gate.fpr_cap,
                "val_episodes": self.gate.val_episodes,
            },
            "eval": {
                "episodes": self.eval_settings.episodes,
                "b_alert": self.eval_settings.b_alert,
                "impact_rate": self.eval_settings.impact_rate,
                "exfil_penalty": self.eval_settings.exfil_penalty,
                "report_threshold": self.eval_settings.report_threshold,
                "greedy_samples": self.eval_settings.greedy_samples,
                "mode": self.eval_settings.mode,
            },
            "policies": list(self.policies),
        }

    def digest(self) -> str:
        blob = json.dumps(self.effective_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def resolve_scenario(ref: str, base: Path) -> Scenario:
    if ref == "default":
        return default_scenario()
    if ref.startswith("chain:"):
        return chain_scenario(int(ref.split(":", 1)[1]))
    path = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if not path.exists():
        raise ConfigError(f"scenario file {path} does not exist")
    return Scenario.from_file(path)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: run config must hold a mapping")
    base = path.parent
    try:
        scenario_ref = str(raw.get("scenario", "default"))
        scenario = resolve_scenario(scenario_ref, base)
        if "attacker" in raw:
            scenario = scenario.with_attacker(raw["attacker"])

        ds_raw = raw.get("dataset", {}) or {}
        csv_path = None
        schema_path = None
        if ds_raw.get("csv"):
            csv_path = (base / ds_raw["csv"]) if not Path(ds_raw["csv"]).is_absolute() else Path(ds_raw["csv"])
            if not csv_path.exists():
                raise ConfigError(f"dataset csv {csv_path} does not exist")
            if not ds_raw.get("schema"):
                raise ConfigError("dataset.csv needs a dataset.schema column map")
            schema_path = (base / ds_raw["schema"]) if not Path(ds_raw["schema"]).is_absolute() else Path(ds_raw["schema"])
            if not schema_path.exists():
                raise ConfigError(f"dataset schema {schema_path} does not exist")
        dataset = DatasetConfig(
            csv=csv_path,
            schema=schema_path,
            synth=SynthConfig(**(ds_raw.get("synth") or {})),
            t_tr=ds_raw.get("t_tr"),
            t_va=ds_raw.get("t_va"),
            train_frac=float(ds_raw.get("train_frac", 0.6)),
            val_frac=float(ds_raw.get("val_frac", 0.2)),
        )

        train_raw = dict(raw.get("train", {}) or {})
        if "hidden" in train_raw:
            train_raw["hidden"] = tuple(train_raw["hidden"])
        train = TrainConfig(**train_raw)
        gate = GateConfig(**(raw.get("gate", {}) or {}))
        eval_settings = EvalSettings(**(raw.get("eval", {}) or {}))
        policies = tuple(raw.get("policies", DEFAULT_POLICIES))
        unknown = set(policies) - {"rlshield", "independent", "playbook", "greedy"}
        if unknown:
            raise ConfigError(f"unknown policies in config: {sorted(unknown)}")

        return RunConfig(
            name=str(raw.get("name", path.stem)),
            output_dir=Path(raw.get("output_dir", "out")),
            master_seed=int(raw.get("master_seed", 0)),
            scenario=scenario,
            scenario_ref=scenario_ref,
            dataset=dataset,
            train=train,
            gate=gate,
            eval_settings=eval_settings,
            policies=policies,
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_column_schema(cfg: RunConfig) -> ColumnSchema:
    if cfg.dataset.schema is None:
        raise ConfigError("no column schema configured")
    return ColumnSchema.from_file(cfg.dataset.schema)
