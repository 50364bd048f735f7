"""Serialization of fit results and reports to JSON/CSV.

fit.json is self-contained for downstream commands: curve reconstruction
(coefficients, covariance block, knot layout; the basis is rebuilt
deterministically from the knot count and domain) and cross-model
comparison (per-observation WAIC contributions plus a fingerprint of the
input data). All writers produce byte-stable output for identical inputs;
wall-clock time is therefore reported to the console only and stored as
null.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
import pandas as pd

from .basis import CenterScale, Level, build_basis, rw2_precision
from .compare import PointwiseCriteria
from .data import AssociationComponent, DataError, ModelSpec, Priors
from .inference import (
    CalibratedComponent,
    Calibration,
    FitResult,
    HyperVector,
    LatentField,
    shared_component_summary,
)

FIT_FORMAT = "jointfit-fit-v1"


def data_fingerprint(*frames) -> str:
    """Stable content hash of the modeled data frames."""
    h = hashlib.sha256()
    for frame in frames:
        h.update(frame.to_csv(index=False).encode("utf-8"))
    return "sha256:" + h.hexdigest()


def _clean(obj):
    """Make an object JSON-safe: arrays to lists, non-finite to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2)
        fh.write("\n")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "fixed_effects": list(spec.fixed_effects),
        "random_intercept": spec.random_intercept,
        "random_slope": spec.random_slope,
        "survival_covariates": list(spec.survival_covariates),
        "association": [
            {"kind": c.kind, "level": int(c.level), "knots": c.knots}
            for c in spec.association
        ],
        "baseline_knots": spec.baseline_knots,
        "eval_at": spec.eval_at,
        "priors": {
            "fixed_effect_variance": spec.priors.fixed_effect_variance,
            "residual_shape": spec.priors.residual_shape,
            "residual_scale": spec.priors.residual_scale,
            "re_df": spec.priors.re_df,
            "baseline_pc_threshold": spec.priors.baseline_pc_threshold,
            "baseline_pc_prob": spec.priors.baseline_pc_prob,
            "gamma12_variance": spec.priors.gamma12_variance,
            "gamma_dev_rate": spec.priors.gamma_dev_rate,
        },
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        fixed_effects=tuple(d["fixed_effects"]),
        random_intercept=d["random_intercept"],
        random_slope=d["random_slope"],
        survival_covariates=tuple(d["survival_covariates"]),
        association=tuple(
            AssociationComponent(c["kind"], Level(c["level"]), c["knots"])
            for c in d["association"]
        ),
        baseline_knots=d["baseline_knots"],
        eval_at=d["eval_at"],
        priors=Priors(**d["priors"]),
    )


def parameter_table(result: FitResult) -> pd.DataFrame:
    """Posterior summary rows: name, mean, sd, q2.5, q97.5."""
    rows = []
    for j, name in enumerate(result.beta_names):
        m, s = float(result.latent_mode.beta[j]), float(result.latent_sd.beta[j])
        rows.append((name, m, s, m - 1.96 * s, m + 1.96 * s))
    for j, name in enumerate(result.phi_names):
        m, s = float(result.latent_mode.phi[j]), float(result.latent_sd.phi[j])
        rows.append((f"surv:{name}", m, s, m - 1.96 * s, m + 1.96 * s))
    theta, se = result.theta, np.sqrt(np.diag(result.hyper_cov))

    def add_transformed(name, idx, fwd, dfwd):
        x, s = float(theta[idx]), float(se[idx])
        lo, hi = fwd(x - 1.96 * s), fwd(x + 1.96 * s)
        rows.append((name, fwd(x), abs(dfwd(x)) * s, min(lo, hi), max(lo, hi)))

    for idx, tname in enumerate(result.theta_names):
        if tname == "log_tau_e":
            add_transformed("sigma_e", idx, lambda x: math.exp(-0.5 * x),
                            lambda x: -0.5 * math.exp(-0.5 * x))
        elif tname == "log_sigma_b0":
            add_transformed("sigma_b0", idx, math.exp, math.exp)
        elif tname == "log_sigma_b1":
            add_transformed("sigma_b1", idx, math.exp, math.exp)
        elif tname == "z_rho":
            add_transformed("rho_b0_b1", idx, math.tanh, lambda x: 1.0 - math.tanh(x) ** 2)
        elif tname == "log_tau_baseline":
            add_transformed("sigma_baseline", idx, lambda x: math.exp(-0.5 * x),
                            lambda x: -0.5 * math.exp(-0.5 * x))
        else:
            add_transformed(tname, idx, lambda x: x, lambda x: 1.0)
    return pd.DataFrame(rows, columns=["name", "mean", "sd", "q2.5", "q97.5"])


def fit_to_dict(result: FitResult, fingerprint: str) -> dict:
    assoc = []
    for ci, comp in enumerate(result.calibration.components):
        assoc.append(
            {
                "kind": comp.kind,
                "level": int(comp.level),
                "knots_n": int(comp.knots.size),
                "domain": [comp.domain[0], comp.domain[1]],
                "summary": shared_component_summary(result, ci),
            }
        )
    table = parameter_table(result)
    return {
        "format": FIT_FORMAT,
        "seed": result.seed,
        "converged": result.converged,
        "data_fingerprint": fingerprint,
        "n_subjects": result.n_subjects,
        "n_longitudinal": result.n_longitudinal,
        "n_survival_rows": result.n_survival_rows,
        "spec": spec_to_dict(result.spec),
        "timing": {
            "outer_evaluations": result.n_outer_evals,
            "newton_iterations": result.n_newton_iters,
            "wall_seconds": None,
        },
        "criteria": {
            "dic": result.dic,
            "p_dic": result.p_dic,
            "waic": result.waic,
            "p_waic": result.p_waic,
            "lppd": result.lppd,
        },
        "theta_names": list(result.theta_names),
        "theta": result.theta,
        "hyper_cov": result.hyper_cov,
        "gamma_slices": [list(sl) for sl in result.gamma_slices],
        "parameters": table.to_dict(orient="records"),
        "baseline": {
            "grid": result.baseline_grid,
            "log_baseline_mean": result.latent_mode.log_baseline,
            "log_baseline_sd": result.latent_sd.log_baseline,
        },
        "association": assoc,
        "pointwise": {
            "n_longitudinal": result.n_longitudinal,
            "n_survival": result.n_survival_rows,
            "waic_contrib": result.pointwise.waic_contrib,
            "lppd": result.pointwise.lppd,
            "p_waic": result.pointwise.p_waic,
        },
    }


def load_fit(path):
    """Reconstruct enough of a FitResult from fit.json for curve/compare.

    The calibrated shared-component values themselves are not stored; the
    histogram/percentile summary stands in for them.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FIT_FORMAT:
        raise DataError(f"{path}: not a recognized fit file")
    spec = spec_from_dict(doc["spec"])
    comps = []
    for comp in doc["association"]:
        lo, hi = comp["domain"]
        level = Level(comp["level"])
        K = comp["knots_n"]
        comps.append(
            CalibratedComponent(
                kind=comp["kind"],
                level=level,
                nu_tilde=None,
                domain=(lo, hi),
                knots=np.linspace(lo, hi, K),
                center_scale=CenterScale(0.5 * (lo + hi), hi - lo),
                basis=build_basis(rw2_precision(K), (lo, hi)) if level is Level.SPLINE else None,
            )
        )
    theta = np.asarray(doc["theta"], dtype=float)
    pointwise = PointwiseCriteria(
        waic_contrib=np.asarray(doc["pointwise"]["waic_contrib"], dtype=float),
        lppd=doc["pointwise"]["lppd"],
        p_waic=doc["pointwise"]["p_waic"],
        waic=doc["criteria"]["waic"],
        dic=doc["criteria"]["dic"],
        p_dic=doc["criteria"]["p_dic"],
    )
    empty = np.zeros(0)
    result = FitResult(
        spec=spec,
        calibration=Calibration(components=tuple(comps)),
        latent_mode=LatentField(
            beta=empty, b=np.zeros((0, 0)), phi=empty,
            log_baseline=np.asarray(doc["baseline"]["log_baseline_mean"], dtype=float),
        ),
        latent_sd=LatentField(
            beta=empty, b=np.zeros((0, 0)), phi=empty,
            log_baseline=np.asarray(doc["baseline"]["log_baseline_sd"], dtype=float),
        ),
        hyper_mode=HyperVector(float(theta[0]), np.zeros(0), None, ()),
        theta=theta,
        theta_names=tuple(doc["theta_names"]),
        hyper_cov=np.asarray(doc["hyper_cov"], dtype=float),
        gamma_slices=tuple(tuple(sl) for sl in doc["gamma_slices"]),
        pointwise=pointwise,
        loglik_at_mode=np.zeros(0),
        dic=doc["criteria"]["dic"],
        p_dic=doc["criteria"]["p_dic"],
        waic=doc["criteria"]["waic"],
        p_waic=doc["criteria"]["p_waic"],
        lppd=doc["criteria"]["lppd"],
        converged=doc["converged"],
        n_outer_evals=doc["timing"]["outer_evaluations"],
        n_newton_iters=doc["timing"]["newton_iterations"],
        wall_seconds=float("nan"),
        seed=doc["seed"],
        n_subjects=doc["n_subjects"],
        n_longitudinal=doc["n_longitudinal"],
        n_survival_rows=doc["n_survival_rows"],
        baseline_grid=np.asarray(doc["baseline"]["grid"], dtype=float),
        beta_names=(),
        phi_names=(),
    )
    return result, doc


def write_curve_csv(path, curve: pd.DataFrame, summary: dict) -> None:
    """Curve grid with percentile markers and density bins in one table."""
    n = max(len(curve), len(summary["hist_counts"]), len(summary["percentiles"]))

    def pad(values, length=n):
        out = list(values) + [np.nan] * (length - len(values))
        return out

    markers = list(summary["percentiles"].items())
    frame = pd.DataFrame(
        {
            "nu": pad(curve["nu"]),
            "f_mean": pad(curve["f_mean"]),
            "f_lo": pad(curve["f_lo"]),
            "f_hi": pad(curve["f_hi"]),
            "marker": pad([k for k, _ in markers]),
            "marker_nu": pad([v for _, v in markers]),
            "hist_left": pad(summary["hist_edges"][:-1]),
            "hist_right": pad(summary["hist_edges"][1:]),
            "hist_count": pad(summary["hist_counts"]),
        }
    )
    frame.to_csv(path, index=False)


def read_curve_csv(path):
    """Round-trip reader for curve CSVs: (curve, markers, histogram)."""
    frame = pd.read_csv(path)
    curve = frame[["nu", "f_mean", "f_lo", "f_hi"]].dropna(subset=["nu"])
    markers = frame[["marker", "marker_nu"]].dropna(subset=["marker"])
    hist = frame[["hist_left", "hist_right", "hist_count"]].dropna(subset=["hist_left"])
    return curve, markers, hist
