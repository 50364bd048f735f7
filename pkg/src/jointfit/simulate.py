"""Scenario generators and replication studies.

Trajectories follow a linear mixed model with a binary covariate and a
time interaction; survival times come from a permutation algorithm: a
marginal pool of candidate event/censoring times is generated first (the
exponential event rate is tuned by bisection to hit the target event
fraction), then candidate times are assigned to subjects in ascending
order, events going to risk-set members with probability proportional to
the hazard implied by their true trajectory at that time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .basis import Level
from .compare import pairwise_waic_test
from .data import (
    AssociationComponent,
    JointDataset,
    Kind,
    ModelSpec,
    validate_and_join,
)
from .inference import FitResult, fit, posterior_curve


class SimulationError(RuntimeError):
    """Configuration or internal failure of the simulation harness."""


def _f_linear(nu):
    return 0.5 * np.asarray(nu, dtype=float)


def _f_quadratic(nu):
    nu = np.asarray(nu, dtype=float)
    return nu**2 / 20.0


def _f_spline(nu):
    nu = np.asarray(nu, dtype=float)
    return nu * np.log(nu**2 + 1.0) ** 1.5 / 8.0


_SCENARIOS = {
    "linear": {
        "true_beta": (0.0, 0.3, 0.5, 0.2),
        "true_sigma_b": (0.8, 0.3, 0.3),
        "true_f": _f_linear,
        "true_level": Level.LINEAR,
        "true_gamma1": 0.5,
    },
    "quadratic": {
        "true_beta": (0.0, 0.3, 0.5, 0.2),
        "true_sigma_b": (2.0, 0.4, 0.2),
        "true_f": _f_quadratic,
        "true_level": Level.QUADRATIC,
        "true_gamma1": None,
    },
    "spline": {
        "true_beta": (-1.5, 0.3, 0.5, 0.2),
        "true_sigma_b": (0.8, 0.3, 0.3),
        "true_f": _f_spline,
        "true_level": Level.SPLINE,
        "true_gamma1": None,
    },
}


@dataclass
class ScenarioConfig:
    """True parameter values and generator settings for one scenario."""

    name: str
    n_subjects: int = 2000
    max_follow_up: float = 10.0
    true_beta: tuple = (0.0, 0.3, 0.5, 0.2)
    true_sigma_e: float = 0.3
    true_sigma_b: tuple = (0.8, 0.3, 0.3)
    true_f: object = _f_linear
    true_level: Level = Level.LINEAR
    true_gamma1: float | None = 0.5
    target_event_rate: float = 0.37
    visit_spacing: float = 0.5
    dropout_scale: float = 4.0
    seed: int = 1

    def __post_init__(self):
        if self.true_sigma_e <= 0 or self.true_sigma_b[0] <= 0 or self.true_sigma_b[1] <= 0:
            raise SimulationError("dispersion parameters must be positive")
        if not -1.0 < self.true_sigma_b[2] < 1.0:
            raise SimulationError("random-effect correlation must lie in (-1, 1)")
        if not 0.0 < self.target_event_rate < 1.0:
            raise SimulationError("target event rate must lie in (0, 1)")

    def true_values(self) -> dict:
        """Truths keyed by the parameter names used in reports."""
        out = {
            "intercept": self.true_beta[0],
            "time": self.true_beta[1],
            "X": self.true_beta[2],
            "X:time": self.true_beta[3],
            "sigma_e": self.true_sigma_e,
            "sigma_b0": self.true_sigma_b[0],
            "sigma_b1": self.true_sigma_b[1],
            "rho": self.true_sigma_b[2],
        }
        if self.true_gamma1 is not None:
            out["gamma_current_value_1"] = self.true_gamma1
        return out


def scenario_defaults(name: str, n_subjects: int = 2000, seed: int = 1) -> ScenarioConfig:
    """Scenario configuration with the published true values."""
    key = str(name).strip().lower()
    if key not in _SCENARIOS:
        raise SimulationError(f"unknown scenario {name!r}; choose from {sorted(_SCENARIOS)}")
    return ScenarioConfig(name=key, n_subjects=n_subjects, seed=seed, **_SCENARIOS[key])


def scenario_model_spec(level, knots: int = 5, baseline_knots: int = 15) -> ModelSpec:
    """Analysis model matching the generator: X, X:time, current value."""
    return ModelSpec(
        fixed_effects=("X", "X:time"),
        association=(AssociationComponent(Kind.CURRENT_VALUE, Level.parse(level), knots=knots),),
        baseline_knots=baseline_knots,
    )


@dataclass
class TrueTrajectories:
    """Subject-level truth: eta_i(t) = intercept_i + slope_i * t."""

    intercepts: np.ndarray
    slopes: np.ndarray
    X: np.ndarray
    b: np.ndarray

    def eta(self, t, subjects=None):
        t = np.asarray(t, dtype=float)
        if subjects is None:
            return self.intercepts[:, None] + self.slopes[:, None] * t[None, :]
        subjects = np.asarray(subjects)
        return self.intercepts[subjects] + self.slopes[subjects] * t


def simulate_longitudinal(config: ScenarioConfig, rng=None):
    """Trajectories plus noisy measurements on the full visit grid.

    Returns the untruncated longitudinal frame (visits up to the maximum
    follow-up) and the true trajectories; survival truncation happens in
    ``generate_dataset``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.n_subjects
    beta = config.true_beta
    s0, s1, rho = config.true_sigma_b
    X = rng.integers(0, 2, size=n).astype(float)
    cov = np.array([[s0 * s0, rho * s0 * s1], [rho * s0 * s1, s1 * s1]])
    b = rng.multivariate_normal(np.zeros(2), cov, size=n, method="cholesky")
    intercepts = beta[0] + b[:, 0] + beta[2] * X
    slopes = beta[1] + b[:, 1] + beta[3] * X
    traj = TrueTrajectories(intercepts=intercepts, slopes=slopes, X=X, b=b)

    visits = np.arange(0.0, config.max_follow_up + 1e-9, config.visit_spacing)
    sub = np.repeat(np.arange(n), visits.size)
    t = np.tile(visits, n)
    eta = traj.eta(t, sub)
    y = eta + rng.normal(scale=config.true_sigma_e, size=t.size)
    frame = pd.DataFrame({"id": sub, "time": t, "y": y, "X": X[sub]})
    return frame, traj


def _tune_event_rate(config: ScenarioConfig, rng, pilot: int = 200_000) -> float:
    """Bisection on the exponential rate so P(event) hits the target."""
    u = rng.random(pilot)
    cens = np.minimum(
        rng.uniform(0.0, config.dropout_scale * config.max_follow_up, size=pilot),
        config.max_follow_up,
    )

    def realized(rate):
        return float(np.mean(-np.log(u) / rate < cens))

    lo, hi = 1e-6, 50.0
    target = config.target_event_rate
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if realized(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def permutation_survival(traj: TrueTrajectories, true_f, config: ScenarioConfig, rng=None) -> pd.DataFrame:
    """Assign a marginal pool of event/censoring times by risk-set sampling.

    Candidate times are processed in ascending order; an event time goes to
    a remaining subject with probability proportional to exp(f(eta_i(t))),
    a censoring time to a uniformly chosen remaining subject.
    """
    rng = np.random.default_rng(config.seed + 1) if rng is None else rng
    n = config.n_subjects
    rate = _tune_event_rate(config, rng)
    event_cand = rng.exponential(1.0 / rate, size=n)
    cens_cand = np.minimum(
        rng.uniform(0.0, config.dropout_scale * config.max_follow_up, size=n),
        config.max_follow_up,
    )
    times = np.minimum(event_cand, cens_cand)
    is_event = event_cand < cens_cand

    order = np.argsort(times, kind="stable")
    remaining = np.ones(n, dtype=bool)
    assigned_t = np.empty(n)
    assigned_d = np.empty(n, dtype=np.int64)
    idx_pool = np.arange(n)
    for pos in order:
        t, ev = times[pos], is_event[pos]
        candidates = idx_pool[remaining]
        if candidates.size == 0:
            raise SimulationError("risk set exhausted before the candidate pool")
        if ev:
            f_vals = np.asarray(true_f(traj.eta(t, candidates)), dtype=float)
            w = np.exp(f_vals - f_vals.max())
            w /= w.sum()
            chosen = candidates[rng.choice(candidates.size, p=w)]
        else:
            chosen = candidates[rng.integers(candidates.size)]
        assigned_t[chosen] = max(t, 1e-6)
        assigned_d[chosen] = int(ev)
        remaining[chosen] = False
    return pd.DataFrame(
        {"id": np.arange(n), "time": assigned_t, "event": assigned_d, "X": traj.X}
    )


def generate_dataset(config: ScenarioConfig):
    """One complete scenario dataset: joined, truncated, validated."""
    ss = np.random.SeedSequence(config.seed)
    rng_long, rng_surv = (np.random.default_rng(s) for s in ss.spawn(2))
    frame, traj = simulate_longitudinal(config, rng_long)
    surv = permutation_survival(traj, config.true_f, config, rng_surv)
    follow = surv.set_index("id")["time"]
    keep = frame["time"] <= frame["id"].map(follow) + 1e-9
    return validate_and_join(frame[keep].reset_index(drop=True), surv), traj


def true_nu_values(dataset: JointDataset, traj: TrueTrajectories) -> np.ndarray:
    """True shared-component values at the observed measurement times."""
    sub = dataset.longitudinal["_subject"].to_numpy(dtype=np.int64)
    t = dataset.longitudinal["time"].to_numpy(dtype=float)
    return traj.eta(t, sub)


def _interval_estimates(result: FitResult) -> dict:
    """Point estimates with 95% intervals for the reported parameters."""
    out = {}
    for j, name in enumerate(result.beta_names):
        m = float(result.latent_mode.beta[j])
        s = float(result.latent_sd.beta[j])
        out[name] = (m, m - 1.96 * s, m + 1.96 * s)
    names = result.theta_names
    theta = result.theta
    se = np.sqrt(np.diag(result.hyper_cov))

    def transformed(idx, fwd):
        lo, hi = fwd(theta[idx] - 1.96 * se[idx]), fwd(theta[idx] + 1.96 * se[idx])
        return (fwd(theta[idx]), min(lo, hi), max(lo, hi))

    for idx, name in enumerate(names):
        if name == "log_tau_e":
            out["sigma_e"] = transformed(idx, lambda x: math.exp(-0.5 * x))
        elif name == "log_sigma_b0":
            out["sigma_b0"] = transformed(idx, math.exp)
        elif name == "log_sigma_b1":
            out["sigma_b1"] = transformed(idx, math.exp)
        elif name == "z_rho":
            out["rho"] = transformed(idx, math.tanh)
        elif name == "log_tau_baseline":
            out["sigma_baseline"] = transformed(idx, lambda x: math.exp(-0.5 * x))
        elif name.startswith("gamma_"):
            out[name] = transformed(idx, lambda x: x)
    return out


@dataclass
class ReplicationMetrics:
    """Aggregated bias/SD/coverage and model-comparison summaries."""

    scenario: str
    n_subjects: int
    nsim: int
    levels: tuple
    reference_level: int
    params: dict
    delta_dic: dict
    delta_waic: dict
    pairwise_nonsig: dict
    pointwise: dict
    n_failed: int
    failures: list = field(default_factory=list)
    cpu_seconds: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for (param, level), stats in sorted(self.params.items()):
            rows.append(
                {
                    "metric": "parameter",
                    "parameter": param,
                    "level": level,
                    "true_value": stats["true"],
                    "mean": stats["bias"],
                    "sd": stats["sd"],
                    "coverage": stats["coverage"],
                    "n": stats["n"],
                }
            )
        for level, stats in sorted(self.delta_dic.items()):
            rows.append(
                {
                    "metric": "delta_dic", "parameter": f"vs_level_{self.reference_level}",
                    "level": level, "true_value": np.nan, "mean": stats["mean"],
                    "sd": stats["sd"], "coverage": np.nan, "n": stats["n"],
                }
            )
        for level, stats in sorted(self.delta_waic.items()):
            rows.append(
                {
                    "metric": "delta_waic", "parameter": f"vs_level_{self.reference_level}",
                    "level": level, "true_value": np.nan, "mean": stats["mean"],
                    "sd": stats["sd"], "coverage": np.nan, "n": stats["n"],
                }
            )
        for pair, rate in sorted(self.pairwise_nonsig.items()):
            rows.append(
                {
                    "metric": "pairwise_nonsig_rate", "parameter": pair, "level": np.nan,
                    "true_value": np.nan, "mean": rate, "sd": np.nan,
                    "coverage": np.nan, "n": self.nsim - self.n_failed,
                }
            )
        for (level, pct), stats in sorted(self.pointwise.items()):
            rows.append(
                {
                    "metric": "pointwise_f", "parameter": f"P{pct}", "level": level,
                    "true_value": stats["true_mean"], "mean": stats["bias"],
                    "sd": stats["sd"], "coverage": stats["coverage"], "n": stats["n"],
                }
            )
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        def key2(d):
            return {f"{a}|{b}": v for (a, b), v in d.items()}

        return {
            "scenario": self.scenario,
            "n_subjects": self.n_subjects,
            "nsim": self.nsim,
            "levels": list(self.levels),
            "reference_level": self.reference_level,
            "n_failed": self.n_failed,
            "failures": self.failures,
            "parameters": key2(self.params),
            "delta_dic": {str(k): v for k, v in self.delta_dic.items()},
            "delta_waic": {str(k): v for k, v in self.delta_waic.items()},
            "pairwise_nonsig_rate": self.pairwise_nonsig,
            "pointwise_f": key2(self.pointwise),
        }


_PCTS = (10, 25, 50, 75, 90)


def _run_one_replicate(args):
    (config, levels, rep_seed, knots, baseline_knots) = args
    rep = {"estimates": {}, "criteria": {}, "contrib": {}, "pointwise": {}, "cpu": {}}
    cfg = replace(config, seed=rep_seed)
    dataset, traj = generate_dataset(cfg)
    nu_true = true_nu_values(dataset, traj)
    nu_pcts = np.percentile(nu_true, _PCTS)
    rep["nu_percentiles"] = nu_pcts
    rep["f_true_at_pcts"] = np.asarray(cfg.true_f(nu_pcts), dtype=float)
    fit_seed_root = np.random.SeedSequence(rep_seed)
    fit_seeds = fit_seed_root.generate_state(len(levels))
    for li, level in enumerate(levels):
        spec = scenario_model_spec(level, knots=knots, baseline_knots=baseline_knots)
        t0 = time.process_time()
        result = fit(dataset, spec, seed=int(fit_seeds[li] % (2**31)))
        rep["cpu"][level] = time.process_time() - t0
        rep["estimates"][level] = _interval_estimates(result)
        rep["criteria"][level] = (result.dic, result.waic)
        rep["contrib"][level] = result.pointwise
        lo, hi = result.calibration.components[0].domain
        width = hi - lo
        grid = np.clip(nu_pcts, lo - 0.2 * width, hi + 0.2 * width)
        curve = posterior_curve(result, 0, grid=grid)
        rep["pointwise"][level] = np.column_stack(
            [curve.f_mean.to_numpy(), curve.f_lo.to_numpy(), curve.f_hi.to_numpy()]
        )
    return rep


def run_replications(config: ScenarioConfig, nsim: int, levels=(1, 2, 3), parallel: int = 1,
                     reference_level=None, knots: int = 5, baseline_knots: int = 15,
                     dump_dir=None) -> ReplicationMetrics:
    """Replicate the scenario, fit the requested levels, aggregate metrics.

    Replicates use independent seed streams spawned from the scenario seed,
    so results do not depend on the degree of parallelism. Failed fits are
    excluded and counted.
    """
    if nsim < 1:
        raise SimulationError("nsim must be at least 1")
    levels = tuple(int(Level.parse(lv)) for lv in levels)
    reference_level = int(reference_level if reference_level is not None else config.true_level)
    seeds = [int(s.generate_state(1)[0] % (2**31)) for s in np.random.SeedSequence(config.seed).spawn(nsim)]
    jobs = [(config, levels, s, knots, baseline_knots) for s in seeds]

    reps, failures = [], []
    if parallel > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(parallel) as pool:
            raw = pool.map_async(_safe_replicate, jobs).get()
    else:
        raw = [_safe_replicate(job) for job in jobs]
    for i, out in enumerate(raw):
        if isinstance(out, dict):
            reps.append(out)
        else:
            failures.append(f"replicate {i}: {out}")
    if not reps:
        raise SimulationError(f"all {nsim} replicates failed; first failure: {failures[0]}")

    truths = config.true_values()
    params = {}
    for level in levels:
        names = set()
        for rep in reps:
            names.update(rep["estimates"][level])
        for name, true in truths.items():
            if name == "gamma_current_value_1" and level != 1:
                continue
            if name not in names:
                continue
            vals = np.array([rep["estimates"][level][name] for rep in reps])
            bias = vals[:, 0] - true
            cover = (vals[:, 1] <= true) & (true <= vals[:, 2])
            params[(name, level)] = {
                "true": float(true),
                "bias": float(bias.mean()),
                "sd": float(bias.std(ddof=1)) if len(reps) > 1 else float("nan"),
                "coverage": float(cover.mean()),
                "n": len(reps),
            }

    delta_dic, delta_waic = {}, {}
    if reference_level in levels:
        for level in levels:
            if level == reference_level:
                continue
            dd = np.array(
                [rep["criteria"][level][0] - rep["criteria"][reference_level][0] for rep in reps]
            )
            dw = np.array(
                [rep["criteria"][level][1] - rep["criteria"][reference_level][1] for rep in reps]
            )
            delta_dic[level] = {
                "mean": float(dd.mean()),
                "sd": float(dd.std(ddof=1)) if len(reps) > 1 else float("nan"),
                "n": len(reps),
            }
            delta_waic[level] = {
                "mean": float(dw.mean()),
                "sd": float(dw.std(ddof=1)) if len(reps) > 1 else float("nan"),
                "n": len(reps),
            }

    pairwise = {}
    for ai in range(len(levels)):
        for bi in range(ai + 1, len(levels)):
            la, lb = levels[ai], levels[bi]
            nonsig = [
                pairwise_waic_test(rep["contrib"][la], rep["contrib"][lb]).p > 0.05
                for rep in reps
            ]
            pairwise[f"level_{la}_vs_{lb}"] = float(np.mean(nonsig))

    pointwise = {}
    for level in levels:
        for pi, pct in enumerate(_PCTS):
            rows = np.array([rep["pointwise"][level][pi] for rep in reps])
            f_true = np.array([rep["f_true_at_pcts"][pi] for rep in reps])
            bias = rows[:, 0] - f_true
            cover = (rows[:, 1] <= f_true) & (f_true <= rows[:, 2])
            pointwise[(level, pct)] = {
                "true_mean": float(f_true.mean()),
                "bias": float(bias.mean()),
                "sd": float(bias.std(ddof=1)) if len(reps) > 1 else float("nan"),
                "coverage": float(cover.mean()),
                "n": len(reps),
            }

    cpu = {
        level: float(np.mean([rep["cpu"][level] for rep in reps])) for level in levels
    }

    metrics = ReplicationMetrics(
        scenario=config.name,
        n_subjects=config.n_subjects,
        nsim=nsim,
        levels=levels,
        reference_level=reference_level,
        params=params,
        delta_dic=delta_dic,
        delta_waic=delta_waic,
        pairwise_nonsig=pairwise,
        pointwise=pointwise,
        n_failed=len(failures),
        failures=failures,
        cpu_seconds=cpu,
    )
    if dump_dir is not None:
        _dump_replicates(reps, levels, dump_dir)
    return metrics


def _safe_replicate(job):
    try:
        return _run_one_replicate(job)
    except Exception as exc:  # noqa: BLE001 - failures are reported, not fatal
        return f"{type(exc).__name__}: {exc}"


def _dump_replicates(reps, levels, dump_dir):
    from pathlib import Path

    out = Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(reps):
        rows = []
        for level in levels:
            for name, (m, lo, hi) in rep["estimates"][level].items():
                rows.append({"level": level, "parameter": name, "estimate": m, "lo": lo, "hi": hi})
            dic, waic = rep["criteria"][level]
            rows.append({"level": level, "parameter": "dic", "estimate": dic, "lo": np.nan, "hi": np.nan})
            rows.append({"level": level, "parameter": "waic", "estimate": waic, "lo": np.nan, "hi": np.nan})
        pd.DataFrame(rows).to_csv(out / f"rep_{i:04d}.csv", index=False)


def pointwise_metrics(entries, percentiles=_PCTS) -> pd.DataFrame:
    """Bias/SD/coverage of the estimated effect at true-percentile points.

    ``entries`` is a sequence of (fit_result, component, true_f, true_nu)
    tuples, one per replicate; percentile locations are taken from each
    replicate's own true shared-component values.
    """
    rows = {pct: {"bias": [], "cover": [], "true": []} for pct in percentiles}
    for result, component, true_f, true_nu in entries:
        pcts = np.percentile(np.asarray(true_nu, dtype=float), percentiles)
        cal = result.calibration.components[component]
        lo, hi = cal.domain
        width = hi - lo
        grid = np.clip(pcts, lo - 0.2 * width, hi + 0.2 * width)
        curve = posterior_curve(result, component, grid=grid)
        f_true = np.asarray(true_f(pcts), dtype=float)
        for pi, pct in enumerate(percentiles):
            rows[pct]["bias"].append(float(curve.f_mean.iloc[pi] - f_true[pi]))
            rows[pct]["cover"].append(
                bool(curve.f_lo.iloc[pi] <= f_true[pi] <= curve.f_hi.iloc[pi])
            )
            rows[pct]["true"].append(float(f_true[pi]))
    out = []
    for pct in percentiles:
        bias = np.array(rows[pct]["bias"])
        out.append(
            {
                "percentile": pct,
                "true_f": float(np.mean(rows[pct]["true"])),
                "bias": float(bias.mean()),
                "sd": float(bias.std(ddof=1)) if bias.size > 1 else float("nan"),
                "coverage": float(np.mean(rows[pct]["cover"])),
                "n": int(bias.size),
            }
        )
    return pd.DataFrame(out)
