"""Flow-record ingestion and leakage-free preprocessing.

Consumes CIC-IDS2017-style flow CSVs (or the synthetic generator below) and
produces standardized feature matrices for the alert emission pools and the
supervised components.

Data quality issues handled here, in order:
  - Leading/trailing whitespace in CSV headers (stripped on read)
  - Non-numeric stray cells in feature columns (coerced to missing)
  - inf / -inf values (replaced with missing before any statistic is fitted)
  - Raw identifiers (IPs, ports, flow IDs, exact timestamps) dropped from the
    feature set and recorded so the manifest shows what was excluded

Leakage prevention: the chronological split is assigned first; medians,
log-column selection, means, stds and the class weight are fitted on the
train split only and reused verbatim on val/test.

Transform order is fixed: inf->missing, median imputation, log1p on the
nonnegative heavy-tailed column set, then z-scoring. Columns that are
constant on the train split standardize to 0 everywhere (they are flagged,
not dropped, so the feature dimension stays stable).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLIT_NONE, SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2, 3
SPLIT_NAMES = {SPLIT_NONE: "none", SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}

BENIGN_LABEL = "benign"

# Labels we expect to see; anything else still maps to attack, with a warning.
KNOWN_LABELS = {
    "benign", "bot", "ddos", "dos goldeneye", "dos hulk", "dos slowhttptest",
    "dos slowloris", "ftp-patator", "heartbleed", "infiltration", "portscan",
    "ssh-patator", "web attack - brute force", "web attack - sql injection",
    "web attack - xss", "bruteforce",
}

_TIMESTAMP_FORMATS = ("%d/%m/%Y %H:%M:%S", "%d/%m/%Y %H:%M")


class SchemaError(DataError):
    """CSV is missing a required column or the column map is inconsistent."""


class EmptyDatasetError(DataError):
    """File parsed cleanly but contains no data rows."""


class TimestampError(DataError):
    """A row's timestamp could not be parsed."""


class InvalidSplitError(DataError):
    """Split cut points violate the chronological-split contract."""


class FitError(DataError):
    """Preprocessing statistics cannot be fitted from the train split."""


class TransformError(DataError):
    """Feature matrix does not match the fitted statistics."""


@dataclass(frozen=True)
class FlowRecord:
    """One labeled flow sample: features, raw label, event time."""

    features: np.ndarray
    label_raw: str
    timestamp: float
    id_fields: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological cut points; train <= t_tr < val <= t_va < test."""

    t_tr: float
    t_va: float

    def __post_init__(self):
        if not (np.isfinite(self.t_tr) and np.isfinite(self.t_va)):
            raise InvalidSplitError("split cut points must be finite")
        if not self.t_tr < self.t_va:
            raise InvalidSplitError(f"t_tr ({self.t_tr}) must be strictly before t_va ({self.t_va})")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV columns to roles. ``features=None`` means every remaining column."""

    label: str
    timestamp: str
    identifiers: tuple[str, ...] = ()
    features: tuple[str, ...] | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "ColumnSchema":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict) or "label" not in raw or "timestamp" not in raw:
            raise SchemaError(f"{path}: column map must name 'label' and 'timestamp' columns")
        return cls(
            label=str(raw["label"]),
            timestamp=str(raw["timestamp"]),
            identifiers=tuple(raw.get("identifiers", ())),
            features=tuple(raw["features"]) if raw.get("features") else None,
        )


@dataclass(frozen=True)
class PreprocessStats:
    """Train-fitted transform parameters, applied identically to every split."""

    medians: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    log_set: tuple[int, ...]
    eps0: float
    pos_weight: float
    dropped_columns: tuple[str, ...]
    constant_columns: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.eps0 <= 0:
            raise FitError("eps0 must be positive")
        if self.pos_weight <= 0:
            raise FitError("pos_weight must be positive")
        if np.any(self.stds < 0):
            raise FitError("standard deviations must be nonnegative")
        d = len(self.medians)
        if any(j < 0 or j >= d for j in self.log_set):
            raise FitError("log_set indices out of range")

    @property
    def d(self) -> int:
        return len(self.medians)

    def to_dict(self) -> dict:
        return {
            "medians": self.medians.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "log_set": list(self.log_set),
            "eps0": self.eps0,
            "pos_weight": self.pos_weight,
            "dropped_columns": list(self.dropped_columns),
            "constant_columns": list(self.constant_columns),
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PreprocessStats":
        return cls(
            medians=np.asarray(raw["medians"], dtype=np.float64),
            means=np.asarray(raw["means"], dtype=np.float64),
            stds=np.asarray(raw["stds"], dtype=np.float64),
            log_set=tuple(raw["log_set"]),
            eps0=float(raw["eps0"]),
            pos_weight=float(raw["pos_weight"]),
            dropped_columns=tuple(raw["dropped_columns"]),
            constant_columns=tuple(raw["constant_columns"]),
            feature_names=tuple(raw["feature_names"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Dataset:
    """Ordered flow records stored column-wise, plus a per-record split tag."""

    features: np.ndarray          # (n, d) float64, may contain NaN before transform
    labels_raw: np.ndarray        # (n,) object
    timestamps: np.ndarray        # (n,) float64
    y: np.ndarray                 # (n,) uint8, binarized labels
    splits: np.ndarray            # (n,) uint8, SPLIT_* codes
    feature_names: list[str]
    dropped_columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels_raw) == len(self.timestamps) == len(self.y) == len(self.splits) == n):
            raise DataError("dataset columns have inconsistent lengths")
        if n == 0:
            raise EmptyDatasetError("dataset has no records")
        if not np.all(np.isfinite(self.timestamps)):
            raise TimestampError("all timestamps must be finite")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def record(self, i: int) -> FlowRecord:
        return FlowRecord(self.features[i], str(self.labels_raw[i]), float(self.timestamps[i]))

    def split_mask(self, code: int) -> np.ndarray:
        return self.splits == code

    def split_counts(self) -> dict[str, int]:
        return {SPLIT_NAMES[c]: int((self.splits == c).sum()) for c in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)}

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[mask].copy(),
            labels_raw=self.labels_raw[mask].copy(),
            timestamps=self.timestamps[mask].copy(),
            y=self.y[mask].copy(),
            splits=self.splits[mask].copy(),
            feature_names=list(self.feature_names),
            dropped_columns=list(self.dropped_columns),
        )


_warned_labels: set[str] = set()


def binarize_label(label: str) -> int:
    """0 for benign, 1 for everything else (attack-by-default for oddballs)."""
    norm = str(label).strip().lower()
    if norm == BENIGN_LABEL:
        return 0
    if norm not in KNOWN_LABELS and norm not in _warned_labels:
        _warned_labels.add(norm)
        logger.warning("unknown label %r mapped to attack (fail-safe default)", label)
    return 1


def parse_timestamp(value, row: int) -> float:
    """UNIX seconds or the CIC d/m/Y H:M[:S] form; anything else is a row error."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if np.isfinite(value):
            return float(value)
        raise TimestampError(f"row {row}: non-finite timestamp {value!r}")
    text = str(value).strip()
    try:
        return float(text)
    except ValueError:
        pass
    for fmt in _TIMESTAMP_FORMATS:
        try:
            return datetime.strptime(text, fmt).timestamp()
        except ValueError:
            continue
    raise TimestampError(f"row {row}: cannot parse timestamp {value!r}")


def load_flow_csv(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read one flow CSV into a Dataset.

    Non-numeric feature cells and +-inf become missing (NaN); identifier
    columns are excluded from the features and recorded in dropped_columns.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, low_memory=False)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise EmptyDatasetError(f"{path}: no data rows") from exc
    frame.columns = [str(c).strip() for c in frame.columns]

    for required in (schema.label, schema.timestamp):
        if required not in frame.columns:
            raise SchemaError(f"{path}: required column {required!r} not in header {list(frame.columns)}")
    if len(frame) == 0:
        raise EmptyDatasetError(f"{path}: no data rows")

    dropped = [c for c in schema.identifiers if c in frame.columns]
    reserved = set(dropped) | {schema.label, schema.timestamp}
    if schema.features is not None:
        missing = [c for c in schema.features if c not in frame.columns]
        if missing:
            raise SchemaError(f"{path}: feature columns {missing} not in header")
        feature_names = [c for c in schema.features if c not in reserved]
    else:
        feature_names = [c for c in frame.columns if c not in reserved]
    if not feature_names:
        raise SchemaError(f"{path}: no feature columns left after dropping identifiers")

    features = np.column_stack([
        pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=np.float64) for c in feature_names
    ])
    features[~np.isfinite(features)] = np.nan

    timestamps = np.array(
        [parse_timestamp(v, i) for i, v in enumerate(frame[schema.timestamp].tolist())], dtype=np.float64
    )
    labels = frame[schema.label].astype(str).to_numpy(dtype=object)
    y = np.array([binarize_label(l) for l in labels], dtype=np.uint8)

    return Dataset(
        features=features,
        labels_raw=labels,
        timestamps=timestamps,
        y=y,
        splits=np.full(len(frame), SPLIT_NONE, dtype=np.uint8),
        feature_names=feature_names,
        dropped_columns=dropped,
    )


def time_split(ds: Dataset, spec: SplitSpec) -> Dataset:
    """Assign train/val/test chronologically; a pure function of timestamps."""
    t_min, t_max = float(ds.timestamps.min()), float(ds.timestamps.max())
    if not (t_min < spec.t_tr < t_max and t_min < spec.t_va < t_max):
        raise InvalidSplitError(
            f"cut points ({spec.t_tr}, {spec.t_va}) must lie strictly inside the data range ({t_min}, {t_max})"
        )
    splits = np.full(ds.n, SPLIT_TEST, dtype=np.uint8)
    splits[ds.timestamps <= spec.t_va] = SPLIT_VAL
    splits[ds.timestamps <= spec.t_tr] = SPLIT_TRAIN
    out = replace(ds, splits=splits)
    counts = out.split_counts()
    empty = [name for name, c in counts.items() if c == 0]
    if empty:
        logger.warning("time_split produced empty splits %s (counts: %s)", empty, counts)
    return out


def _check_train_matrix(X: np.ndarray, feature_names: list[str]) -> np.ndarray:
    """inf -> NaN, and refuse columns with zero finite training values."""
    X = X.astype(np.float64, copy=True)
    X[~np.isfinite(X)] = np.nan
    dead = np.where(np.all(np.isnan(X), axis=0))[0]
    if dead.size:
        names = ", ".join(feature_names[j] for j in dead)
        raise FitError(f"feature column(s) with zero finite training values: {names}")
    return X


def _default_log_set(X_train: np.ndarray) -> tuple[int, ...]:
    """Columns whose finite training minimum is nonnegative."""
    with np.errstate(all="ignore"):
        mins = np.nanmin(X_train, axis=0)
    return tuple(int(j) for j in np.where(mins >= 0)[0])


def _apply_log(X: np.ndarray, log_set: tuple[int, ...]) -> np.ndarray:
    out = X.copy()
    for j in log_set:
        col = out[:, j]
        nonneg = col >= 0
        out[nonneg, j] = np.log1p(col[nonneg])
    return out


def fit_stats(ds: Dataset, log_set: tuple[int, ...] | None = None, eps0: float = 1e-8) -> PreprocessStats:
    """Fit medians, log-column set, z-score statistics and the class weight.

    Uses the train split only. ``log_set=None`` selects every column whose
    finite training minimum is nonnegative.
    """
    mask = ds.split_mask(SPLIT_TRAIN)
    if not mask.any():
        raise FitError("train split is empty; run time_split first")
    X = _check_train_matrix(ds.features[mask], ds.feature_names)
    y = ds.y[mask]

    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0:
        raise FitError("no attack-labeled rows in the train split; cannot compute the class weight")
    if n_neg == 0:
        raise FitError("no benign-labeled rows in the train split; cannot compute the class weight")

    medians = np.nanmedian(X, axis=0)
    if log_set is None:
        log_set = _default_log_set(X)
    else:
        log_set = tuple(sorted(int(j) for j in log_set))
        if any(j < 0 or j >= ds.d for j in log_set):
            raise FitError(f"log_set indices out of range for d={ds.d}")

    X_imp = np.where(np.isnan(X), medians, X)
    X_log = _apply_log(X_imp, log_set)
    means = X_log.mean(axis=0)
    stds = np.sqrt(np.mean((X_log - means) ** 2, axis=0))
    constant = tuple(ds.feature_names[j] for j in np.where(stds == 0.0)[0])
    if constant:
        logger.warning("constant training columns standardize to zero: %s", ", ".join(constant))

    return PreprocessStats(
        medians=medians,
        means=means,
        stds=stds,
        log_set=log_set,
        eps0=float(eps0),
        pos_weight=n_neg / n_pos,
        dropped_columns=tuple(ds.dropped_columns),
        constant_columns=constant,
        feature_names=tuple(ds.feature_names),
    )


def transform_matrix(X: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    """Apply the fitted chain (inf->NaN, impute, log1p, standardize) to raw features."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != stats.d:
        raise TransformError(f"feature matrix has shape {X.shape}, stats were fitted for d={stats.d}")
    X = X.copy()
    X[~np.isfinite(X)] = np.nan
    X = np.where(np.isnan(X), stats.medians, X)
    X = _apply_log(X, stats.log_set)
    out = (X - stats.means) / (stats.stds + stats.eps0)
    const = stats.stds == 0.0
    if const.any():
        out[:, const] = 0.0
    if not np.all(np.isfinite(out)):
        raise TransformError("transform produced non-finite values")
    return out


def transform(ds: Dataset, stats: PreprocessStats) -> Dataset:
    """Return a copy of the dataset with standardized, fully finite features."""
    return replace(ds, features=transform_matrix(ds.features, stats))


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the synthetic flow generator."""

    d: int = 16
    rows: int = 1000
    attack_fraction: float = 0.1
    missing_rate: float = 0.01
    inf_rate: float = 0.005
    benign_scale: float = 1.0
    attack_shift: float = 1.2
    start_time: float = 1_500_000_000.0

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError(f"synthetic generator needs d > 0, got {self.d}")
        if self.rows <= 0:
            raise ConfigError(f"synthetic generator needs rows > 0, got {self.rows}")
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ConfigError("attack_fraction must lie in [0, 1]")


_SYNTH_ATTACKS = ("DDoS", "PortScan", "DoS Hulk")


def synth_flows(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic flow dataset with separable classes.

    The first half of the columns are heavy-tailed nonnegative rates (so the
    default log-column selection picks them up); the rest are zero-mean
    gaussians. Attack rows shift every column by ``attack_shift``.
    """
    rng = np.random.default_rng(seed)
    n, d = config.rows, config.d
    is_attack = rng.random(n) < config.attack_fraction
    n_heavy = (d + 1) // 2

    shift = np.where(is_attack[:, None], config.attack_shift, 0.0)
    heavy = rng.lognormal(mean=0.0, sigma=1.0, size=(n, n_heavy)) * config.benign_scale + shift[:, :n_heavy]
    gauss = rng.normal(loc=0.0, scale=1.0, size=(n, d - n_heavy)) + shift[:, : d - n_heavy]
    features = np.concatenate([heavy, gauss], axis=1)

    if config.missing_rate > 0:
        features[rng.random((n, d)) < config.missing_rate] = np.nan
    if config.inf_rate > 0:
        features[rng.random((n, d)) < config.inf_rate] = np.inf

    timestamps = config.start_time + np.cumsum(rng.uniform(0.5, 1.5, size=n))
    labels = np.array(
        [(_SYNTH_ATTACKS[i % len(_SYNTH_ATTACKS)] if a else "BENIGN") for i, a in enumerate(is_attack)],
        dtype=object,
    )
    y = np.array([binarize_label(l) for l in labels], dtype=np.uint8)
    names = [f"rate_{j}" for j in range(n_heavy)] + [f"stat_{j}" for j in range(d - n_heavy)]

    return Dataset(
        features=features,
        labels_raw=labels,
        timestamps=timestamps,
        y=y,
        splits=np.full(n, SPLIT_NONE, dtype=np.uint8),
        feature_names=names,
    )


def default_split_spec(ds: Dataset, train_frac: float = 0.6, val_frac: float = 0.2) -> SplitSpec:
    """Quantile-based cut points giving roughly the requested proportions."""
    t = np.sort(ds.timestamps)
    t_tr = float(t[int(len(t) * train_frac)])
    t_va = float(t[int(len(t) * (train_frac + val_frac))])
    if t_tr >= t_va:  # degenerate timestamp ties; nudge apart
        t_va = np.nextafter(t_tr, np.inf)
    return SplitSpec(t_tr=t_tr, t_va=t_va)


def write_manifest(path: str | Path, ds: Dataset, spec: SplitSpec, stats: PreprocessStats,
                   config_digest: str = "") -> None:
    """Persist the split assignment + stats digest so a run is reproducible bit-for-bit."""
    manifest = {
        "t_tr": spec.t_tr,
        "t_va": spec.t_va,
        "counts": ds.split_counts(),
        "assignment": [SPLIT_NAMES[int(c)] for c in ds.splits],
        "stats_digest": stats.digest(),
        "config_digest": config_digest,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class FlowPreprocessor(BaseEstimator, TransformerMixin):
    """Sklearn-style wrapper around the fit/transform chain for raw matrices.

    Parameters
    ----------
    log_features : "auto" or sequence of column indices
        Columns to log1p; "auto" picks columns with nonnegative training minimum.
    eps0 : float
        Stability constant added to the standard deviation.
    """

    def __init__(self, log_features="auto", eps0: float = 1e-8):
        self.log_features = log_features
        self.eps0 = eps0

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("FlowPreprocessor expects a 2-D feature matrix")
        names = [f"x{j}" for j in range(X.shape[1])]
        Xc = _check_train_matrix(X, names)
        medians = np.nanmedian(Xc, axis=0)
        log_set = _default_log_set(Xc) if self.log_features == "auto" else tuple(sorted(int(j) for j in self.log_features))
        X_imp = np.where(np.isnan(Xc), medians, Xc)
        X_log = _apply_log(X_imp, log_set)
        self.n_features_in_ = X.shape[1]
        self.medians_ = medians
        self.log_set_ = log_set
        self.means_ = X_log.mean(axis=0)
        self.stds_ = np.sqrt(np.mean((X_log - self.means_) ** 2, axis=0))
        if y is not None:
            yb = np.asarray(y).astype(int)
            pos, neg = int((yb == 1).sum()), int((yb == 0).sum())
            self.pos_weight_ = (neg / pos) if pos > 0 and neg > 0 else None
        else:
            self.pos_weight_ = None
        return self

    def transform(self, X):
        if not hasattr(self, "medians_"):
            raise NotFittedError("FlowPreprocessor must be fitted before transform")
        stats = PreprocessStats(
            medians=self.medians_,
            means=self.means_,
            stds=self.stds_,
            log_set=self.log_set_,
            eps0=self.eps0,
            pos_weight=self.pos_weight_ if self.pos_weight_ else 1.0,
            dropped_columns=(),
            constant_columns=(),
            feature_names=tuple(f"x{j}" for j in range(self.n_features_in_)),
        )
        return transform_matrix(np.asarray(X, dtype=np.float64), stats)
