"""Data model, design matrices, priors, and the Poisson survival expansion.

Longitudinal CSVs carry ``id,time,y,<covariate...>``; survival CSVs carry
``id,time,event,<covariate...>`` with one row per subject. The continuous
follow-up is discretized into equal-width intervals, one piecewise-constant
log-baseline-hazard value per interval, and each subject contributes one
Poisson row per interval at risk with the overlap length as exposure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .basis import Level


class DataError(ValueError):
    """Invalid input data or model specification."""


class Kind:
    """Association component kinds."""

    CURRENT_VALUE = "current_value"
    CURRENT_SLOPE = "current_slope"

    _ALIASES = {
        "current_value": CURRENT_VALUE,
        "cv": CURRENT_VALUE,
        "value": CURRENT_VALUE,
        "current_slope": CURRENT_SLOPE,
        "cs": CURRENT_SLOPE,
        "slope": CURRENT_SLOPE,
    }

    @classmethod
    def parse(cls, value: str) -> str:
        key = str(value).strip().lower()
        if key not in cls._ALIASES:
            raise DataError(f"unknown association kind: {value!r}")
        return cls._ALIASES[key]


@dataclass(frozen=True)
class LongitudinalRecord:
    subject_id: object
    t: float
    y: float
    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: object
    time: float
    event: int
    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Priors:
    """Default prior configuration for all model parameters."""

    fixed_effect_variance: float = 100.0
    residual_shape: float = 1.0
    residual_scale: float = 5e-5
    re_df: float = 3.0
    baseline_pc_threshold: float = 0.5
    baseline_pc_prob: float = 0.01
    gamma12_variance: float = 100.0
    gamma_dev_rate: float = 30.0

    def __post_init__(self):
        for name in ("fixed_effect_variance", "residual_shape", "residual_scale",
                     "baseline_pc_threshold", "baseline_pc_prob", "gamma12_variance",
                     "gamma_dev_rate"):
            if getattr(self, name) <= 0:
                raise DataError(f"prior parameter {name} must be positive")

    @property
    def baseline_pc_rate(self) -> float:
        """Exponential rate on the baseline RW2 standard deviation."""
        return -math.log(self.baseline_pc_prob) / self.baseline_pc_threshold


def default_priors() -> Priors:
    return Priors()


@dataclass(frozen=True)
class AssociationComponent:
    kind: str
    level: Level
    knots: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        object.__setattr__(self, "level", Level.parse(self.level))
        if self.level is Level.SPLINE and self.knots < 3:
            raise DataError("SPLINE association needs at least 3 knots")


@dataclass(frozen=True)
class ModelSpec:
    """Design and prior specification of the joint model.

    ``fixed_effects`` entries are covariate names, optionally suffixed with
    ``:time`` for a time interaction; an intercept and a linear time slope
    are always included in the longitudinal submodel.
    """

    fixed_effects: tuple = ()
    random_intercept: bool = True
    random_slope: bool = True
    survival_covariates: tuple = ()
    association: tuple = (AssociationComponent(Kind.CURRENT_VALUE, Level.LINEAR),)
    baseline_knots: int = 15
    priors: Priors = field(default_factory=default_priors)
    eval_at: str = "midpoint"

    def __post_init__(self):
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "survival_covariates", tuple(self.survival_covariates))
        object.__setattr__(self, "association", tuple(self.association))
        if not self.association:
            raise DataError("at least one association component is required")
        if self.baseline_knots < 2:
            raise DataError("baseline_knots must be at least 2")
        if self.eval_at not in ("midpoint", "start"):
            raise DataError("eval_at must be 'midpoint' or 'start'")

    def at_level(self, level) -> "ModelSpec":
        """Copy of this spec with every association component at ``level``."""
        level = Level.parse(level)
        comps = tuple(replace(c, level=level) for c in self.association)
        return replace(self, association=comps)

    @property
    def beta_names(self) -> tuple:
        names = ["intercept", "time"]
        for term in self.fixed_effects:
            names.append(term)
        return tuple(names)

    @property
    def n_random(self) -> int:
        return int(self.random_intercept) + int(self.random_slope)


@dataclass
class JointDataset:
    """Validated longitudinal records joined with one survival row each.

    ``longitudinal`` is sorted by (subject index, time); ``survival`` has
    one row per subject in subject-index order.
    """

    longitudinal: pd.DataFrame
    survival: pd.DataFrame
    subject_index: dict

    @property
    def n_subjects(self) -> int:
        return len(self.subject_index)

    @property
    def n_longitudinal(self) -> int:
        return len(self.longitudinal)

    def covariate_names(self) -> tuple:
        skip = {"id", "time", "y", "event", "_subject"}
        long_cov = [c for c in self.longitudinal.columns if c not in skip]
        surv_cov = [c for c in self.survival.columns if c not in skip]
        return tuple(dict.fromkeys(long_cov + surv_cov))


def _records_to_frame(records, survival: bool) -> pd.DataFrame:
    rows = []
    for rec in records:
        base = (
            {"id": rec.subject_id, "time": rec.time, "event": rec.event}
            if survival
            else {"id": rec.subject_id, "time": rec.t, "y": rec.y}
        )
        base.update(rec.covariates)
        rows.append(base)
    return pd.DataFrame(rows)


def validate_and_join(longitudinal, survival) -> JointDataset:
    """Join longitudinal and survival inputs into a validated dataset.

    Accepts data frames or record lists. Raises ``DataError`` for orphan
    longitudinal subjects, duplicate survival rows, non-positive follow-up,
    measurements past follow-up, or non-finite values.
    """
    if not isinstance(longitudinal, pd.DataFrame):
        longitudinal = _records_to_frame(list(longitudinal), survival=False)
    if not isinstance(survival, pd.DataFrame):
        survival = _records_to_frame(list(survival), survival=True)
    if len(longitudinal) == 0 or len(survival) == 0:
        raise DataError("longitudinal and survival inputs must be non-empty")
    for col in ("id", "time", "y"):
        if col not in longitudinal.columns:
            raise DataError(f"longitudinal data is missing column {col!r}")
    for col in ("id", "time", "event"):
        if col not in survival.columns:
            raise DataError(f"survival data is missing column {col!r}")

    surv = survival.copy()
    if surv["id"].duplicated().any():
        dup = surv.loc[surv["id"].duplicated(), "id"].iloc[0]
        raise DataError(f"duplicate survival record for subject {dup!r}")
    subject_index = {sid: i for i, sid in enumerate(surv["id"])}
    if not np.all(np.isfinite(surv["time"].to_numpy(dtype=float))):
        raise DataError("survival times must be finite")
    if (surv["time"].to_numpy(dtype=float) <= 0).any():
        bad = surv.loc[surv["time"] <= 0, "id"].iloc[0]
        raise DataError(f"non-positive follow-up time for subject {bad!r}")
    events = surv["event"].to_numpy(dtype=float)
    if not np.all(np.isin(events, (0.0, 1.0))):
        raise DataError("event indicator must be 0 or 1")

    lng = longitudinal.copy()
    missing = set(lng["id"]) - set(subject_index)
    if missing:
        raise DataError(f"longitudinal subject {sorted(missing, key=str)[0]!r} has no survival record")
    if not np.all(np.isfinite(lng["y"].to_numpy(dtype=float))):
        raise DataError("longitudinal marker values must be finite")
    t = lng["time"].to_numpy(dtype=float)
    if not np.all(np.isfinite(t)) or (t < 0).any():
        raise DataError("longitudinal measurement times must be finite and non-negative")

    follow_up = surv.set_index("id")["time"]
    limit = lng["id"].map(follow_up).to_numpy(dtype=float)
    late = t > limit + 1e-9
    if late.any():
        i = int(np.flatnonzero(late)[0])
        raise DataError(
            f"measurement at t={t[i]:g} exceeds follow-up {limit[i]:g} "
            f"for subject {lng['id'].iloc[i]!r}"
        )

    lng["_subject"] = lng["id"].map(subject_index)
    lng = lng.sort_values(["_subject", "time"], kind="mergesort").reset_index(drop=True)
    surv["_subject"] = np.arange(len(surv))
    surv = surv.reset_index(drop=True)
    return JointDataset(longitudinal=lng, survival=surv, subject_index=subject_index)


@dataclass
class ExpandedSurvival:
    """Poisson rows from discretizing follow-up on an equal-width grid."""

    subject: np.ndarray
    interval: np.ndarray
    t_mid: np.ndarray
    exposure: np.ndarray
    count: np.ndarray
    grid: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.subject.size

    @property
    def n_intervals(self) -> int:
        return self.grid.size - 1


def expand_survival(survival, n_intervals: int = 15, eval_at: str = "midpoint") -> ExpandedSurvival:
    """Expand survival records into interval-level Poisson rows.

    The grid has ``n_intervals`` equal-width intervals on [0, max T]. Each
    subject gets one row per interval overlapping (0, T]; exposure is the
    overlap length, the count is the event indicator on the final row.
    ``eval_at`` selects where the shared components are evaluated: the
    midpoint of the covered part of the interval, or its start.
    """
    if n_intervals < 2:
        raise DataError("n_intervals must be at least 2")
    if isinstance(survival, JointDataset):
        survival = survival.survival
    times = survival["time"].to_numpy(dtype=float)
    events = survival["event"].to_numpy(dtype=float).astype(np.int64)
    if (times <= 0).any():
        raise DataError("non-positive follow-up time")
    t_max = float(times.max())
    grid = np.linspace(0.0, t_max, n_intervals + 1)
    width = t_max / n_intervals

    # Number of rows per subject: intervals with strictly positive overlap.
    m = np.ceil(times / width - 1e-12).astype(np.int64)
    m = np.clip(m, 1, n_intervals)
    subj = np.repeat(np.arange(times.size), m)
    interval = np.concatenate([np.arange(k) for k in m]) if times.size else np.empty(0, dtype=np.int64)
    start = grid[interval]
    end = np.minimum(grid[interval + 1], times[subj])
    exposure = end - start
    t_eval = 0.5 * (start + end) if eval_at == "midpoint" else start
    count = np.zeros(subj.size, dtype=np.int64)
    last = np.cumsum(m) - 1
    count[last] = events
    return ExpandedSurvival(
        subject=subj,
        interval=interval,
        t_mid=t_eval,
        exposure=exposure,
        count=count,
        grid=grid,
    )


@dataclass
class DesignMatrices:
    """Design blocks for the longitudinal and survival submodels."""

    X_long: np.ndarray
    Z_long: np.ndarray
    W_surv: np.ndarray
    X_surv: np.ndarray
    Z_surv: np.ndarray
    dX_surv: np.ndarray
    dZ_surv: np.ndarray
    beta_names: tuple
    phi_names: tuple


def _subject_covariates(dataset: JointDataset, names) -> np.ndarray:
    """Per-subject covariate values, required to be time-constant."""
    n = dataset.n_subjects
    out = np.zeros((n, len(names)))
    lng = dataset.longitudinal
    surv = dataset.survival
    for j, name in enumerate(names):
        if name in lng.columns:
            vals = lng[name].to_numpy(dtype=float)
            if np.isnan(vals).any():
                raise DataError(f"missing values in covariate {name!r}")
            per = np.full(n, np.nan)
            for sid, grp in lng.groupby("_subject")[name]:
                v = grp.to_numpy(dtype=float)
                if v.size and np.ptp(v) > 1e-9:
                    raise DataError(f"covariate {name!r} must be constant within subject")
                per[int(sid)] = v[0]
            if np.isnan(per).any() and name in surv.columns:
                sv = surv[name].to_numpy(dtype=float)
                per = np.where(np.isnan(per), sv, per)
            if np.isnan(per).any():
                raise DataError(f"covariate {name!r} missing for some subjects")
            out[:, j] = per
        elif name in surv.columns:
            vals = surv[name].to_numpy(dtype=float)
            if np.isnan(vals).any():
                raise DataError(f"missing values in covariate {name!r}")
            out[:, j] = vals
        else:
            raise DataError(f"covariate {name!r} not found in the data")
    return out


def _parse_fixed_terms(fixed_effects) -> list:
    """Split terms into (covariate, with_time_interaction) pairs."""
    terms = []
    for term in fixed_effects:
        if term.endswith(":time"):
            terms.append((term[: -len(":time")], True))
        elif ":" in term:
            raise DataError(f"unsupported interaction term {term!r}; only ':time' is supported")
        else:
            terms.append((term, False))
    return terms


def _fixed_design(t: np.ndarray, cov: np.ndarray, terms) -> np.ndarray:
    cols = [np.ones_like(t), t]
    for j, (_, with_time) in enumerate(terms):
        cols.append(cov[:, j] * t if with_time else cov[:, j])
    return np.column_stack(cols)


def _fixed_design_dt(t: np.ndarray, cov: np.ndarray, terms) -> np.ndarray:
    cols = [np.zeros_like(t), np.ones_like(t)]
    for j, (_, with_time) in enumerate(terms):
        cols.append(cov[:, j] if with_time else np.zeros_like(t))
    return np.column_stack(cols)


def _random_design(t: np.ndarray, spec: ModelSpec) -> np.ndarray:
    cols = []
    if spec.random_intercept:
        cols.append(np.ones_like(t))
    if spec.random_slope:
        cols.append(t)
    return np.column_stack(cols) if cols else np.empty((t.size, 0))


def _random_design_dt(t: np.ndarray, spec: ModelSpec) -> np.ndarray:
    cols = []
    if spec.random_intercept:
        cols.append(np.zeros_like(t))
    if spec.random_slope:
        cols.append(np.ones_like(t))
    return np.column_stack(cols) if cols else np.empty((t.size, 0))


def design_matrices(spec: ModelSpec, dataset: JointDataset,
                    expanded: ExpandedSurvival | None) -> DesignMatrices:
    """Assemble fixed/random design blocks for both submodels.

    Longitudinal designs are evaluated at measurement times; survival-side
    value and time-derivative designs are evaluated at the expanded-row
    evaluation points for the subject owning each row.
    """
    terms = _parse_fixed_terms(spec.fixed_effects)
    names = [name for name, _ in terms]
    cov_subject = _subject_covariates(dataset, tuple(dict.fromkeys(names))) if names else np.empty((dataset.n_subjects, 0))
    name_pos = {name: j for j, name in enumerate(dict.fromkeys(names))}
    cov_cols = cov_subject[:, [name_pos[name] for name in names]] if names else cov_subject

    t_long = dataset.longitudinal["time"].to_numpy(dtype=float)
    sub_long = dataset.longitudinal["_subject"].to_numpy(dtype=np.int64)
    X_long = _fixed_design(t_long, cov_cols[sub_long], terms)
    Z_long = _random_design(t_long, spec)

    beta_names = ["intercept", "time"]
    for name, with_time in terms:
        beta_names.append(f"{name}:time" if with_time else name)

    if expanded is None:
        empty = np.empty((0, X_long.shape[1]))
        return DesignMatrices(
            X_long=X_long, Z_long=Z_long,
            W_surv=np.empty((0, len(spec.survival_covariates))),
            X_surv=empty, Z_surv=np.empty((0, Z_long.shape[1])),
            dX_surv=empty, dZ_surv=np.empty((0, Z_long.shape[1])),
            beta_names=tuple(beta_names), phi_names=tuple(spec.survival_covariates),
        )

    w_subject = _subject_covariates(dataset, spec.survival_covariates) if spec.survival_covariates else np.empty((dataset.n_subjects, 0))
    sub_s = expanded.subject
    t_s = expanded.t_mid
    X_surv = _fixed_design(t_s, cov_cols[sub_s], terms)
    dX_surv = _fixed_design_dt(t_s, cov_cols[sub_s], terms)
    Z_surv = _random_design(t_s, spec)
    dZ_surv = _random_design_dt(t_s, spec)
    return DesignMatrices(
        X_long=X_long,
        Z_long=Z_long,
        W_surv=w_subject[sub_s],
        X_surv=X_surv,
        Z_surv=Z_surv,
        dX_surv=dX_surv,
        dZ_surv=dZ_surv,
        beta_names=tuple(beta_names),
        phi_names=tuple(spec.survival_covariates),
    )


def read_longitudinal_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    for col in ("id", "time", "y"):
        if col not in df.columns:
            raise DataError(f"{path}: missing required column {col!r}")
        if df[col].isna().any():
            row = int(df.index[df[col].isna()][0]) + 2
            raise DataError(f"{path}: missing value in column {col!r} (line {row})")
    return df


def read_survival_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    for col in ("id", "time", "event"):
        if col not in df.columns:
            raise DataError(f"{path}: missing required column {col!r}")
        if df[col].isna().any():
            row = int(df.index[df[col].isna()][0]) + 2
            raise DataError(f"{path}: missing value in column {col!r} (line {row})")
    return df


def write_dataset_csvs(dataset: JointDataset, long_path, surv_path) -> None:
    """Write the dataset back out in the canonical CSV schemas."""
    lng = dataset.longitudinal.drop(columns=["_subject"], errors="ignore")
    srv = dataset.survival.drop(columns=["_subject"], errors="ignore")
    lng.to_csv(long_path, index=False)
    srv.to_csv(surv_path, index=False)
