"""Command-line interface: fit, simulate, compare, curve.

All commands are driven by a YAML config file; ``--seed``, ``--threads``
and ``--out`` override the corresponding config keys. Exit codes: 0 on
success, 1 on input or configuration errors, 2 on numerical
non-convergence (partial outputs and diagnostics are still written).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .basis import BasisError, Level
from .compare import CompareError, pairwise_waic_test
from .data import (
    AssociationComponent,
    DataError,
    ModelSpec,
    Priors,
    default_priors,
    read_longitudinal_csv,
    read_survival_csv,
    validate_and_join,
    write_dataset_csvs,
)
from .inference import InferenceError, NonConvergenceError, fit, posterior_curve
from .serialize import (
    data_fingerprint,
    fit_to_dict,
    load_fit,
    parameter_table,
    write_curve_csv,
    write_json,
)
from .simulate import (
    SimulationError,
    generate_dataset,
    run_replications,
    scenario_defaults,
)


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        raise ConfigError("--config is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a mapping")
    return cfg


def _resolve(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    cfg.setdefault("out", ".")
    return cfg


def _require(cfg: dict, key: str, command: str):
    if key not in cfg:
        raise ConfigError(f"command '{command}' needs a '{key}' block in the config")
    return cfg[key]


def _spec_from_config(block: dict) -> ModelSpec:
    assoc = []
    for comp in block.get("association", [{"kind": "current_value", "level": 1}]):
        assoc.append(
            AssociationComponent(
                comp.get("kind", "current_value"),
                Level.parse(comp.get("level", 1)),
                int(comp.get("knots", 5)),
            )
        )
    priors = default_priors()
    overrides = block.get("priors", {})
    if overrides:
        priors = Priors(**{**priors.__dict__, **overrides})
    return ModelSpec(
        fixed_effects=tuple(block.get("fixed_effects", ())),
        random_intercept=bool(block.get("random_intercept", True)),
        random_slope=bool(block.get("random_slope", True)),
        survival_covariates=tuple(block.get("survival_covariates", ())),
        association=tuple(assoc),
        baseline_knots=int(block.get("baseline_knots", 15)),
        priors=priors,
        eval_at=block.get("eval_at", "midpoint"),
    )


def _component_tag(index: int, comp) -> str:
    return f"{index}_{comp.kind}"


def cmd_fit(cfg: dict) -> int:
    block = _require(cfg, "fit", "fit")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    long_path = block.get("longitudinal")
    surv_path = block.get("survival")
    if not long_path or not surv_path:
        raise ConfigError("fit block needs 'longitudinal' and 'survival' CSV paths")
    lng = read_longitudinal_csv(long_path)
    srv = read_survival_csv(surv_path)
    dataset = validate_and_join(lng, srv)
    spec = _spec_from_config(block.get("model", {}))
    fingerprint = data_fingerprint(
        dataset.longitudinal.drop(columns=["_subject"]),
        dataset.survival.drop(columns=["_subject"]),
    )
    seed = int(cfg["seed"])
    exit_code = 0
    try:
        result = fit(dataset, spec, seed=seed)
    except NonConvergenceError as err:
        write_json(
            {
                "error": str(err),
                "trace": [list(t) for t in (err.trace or [])],
                "data_fingerprint": fingerprint,
            },
            out / "fit_diagnostics.json",
        )
        opt = getattr(err.partial, "get", lambda *_: None)("opt") if isinstance(err.partial, dict) else err.partial
        if opt is None or not hasattr(opt, "theta"):
            print(f"fit did not converge: {err}", file=sys.stderr)
            return 2
        print(f"fit did not converge; partial diagnostics written: {err}", file=sys.stderr)
        return 2

    write_json(fit_to_dict(result, fingerprint), out / "fit.json")
    parameter_table(result).to_csv(out / "params.csv", index=False)
    figures = bool(block.get("figures", True))
    for ci, comp in enumerate(result.calibration.components):
        grid_block = block.get("grid", {})
        lo, hi = comp.domain
        grid = np.linspace(
            float(grid_block.get("min", lo)), float(grid_block.get("max", hi)),
            int(grid_block.get("points", 201)),
        )
        curve = posterior_curve(result, ci, grid=grid)
        from .inference import shared_component_summary

        summary = shared_component_summary(result, ci)
        tag = _component_tag(ci, comp)
        write_curve_csv(out / f"curve_{tag}.csv", curve, summary)
        if figures:
            from .plots import association_figure

            association_figure(
                curve, summary, out / f"curve_{tag}.png",
                title=f"{comp.kind} association (level {int(comp.level)})",
            )
    print(
        f"fit: converged={result.converged} waic={result.waic:.2f} dic={result.dic:.2f} "
        f"evaluations={result.n_outer_evals} wall={result.wall_seconds:.1f}s -> {out}"
    )
    return exit_code


def cmd_simulate(cfg: dict) -> int:
    block = _require(cfg, "simulate", "simulate")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    name = block.get("scenario")
    if not name:
        raise ConfigError("simulate block needs a 'scenario' name")
    config = scenario_defaults(
        name,
        n_subjects=int(block.get("n_subjects", 2000)),
        seed=int(cfg["seed"]),
    )
    if "visit_spacing" in block:
        config.visit_spacing = float(block["visit_spacing"])
    if "event_rate" in block:
        config.target_event_rate = float(block["event_rate"])
    if "max_follow_up" in block:
        config.max_follow_up = float(block["max_follow_up"])

    nsim = int(block.get("nsim", 0))
    if nsim <= 0 or block.get("dump", False):
        dataset, traj = generate_dataset(config)
        write_dataset_csvs(dataset, out / "longitudinal.csv", out / "survival.csv")
        if block.get("dump_truth", False):
            pd.DataFrame(
                {
                    "id": dataset.survival["id"],
                    "intercept": traj.intercepts,
                    "slope": traj.slopes,
                    "X": traj.X,
                }
            ).to_csv(out / "truth.csv", index=False)
        print(
            f"simulate: wrote {dataset.n_longitudinal} measurements / "
            f"{dataset.n_subjects} subjects (event rate "
            f"{dataset.survival['event'].mean():.3f}) -> {out}"
        )
        return 0

    levels = tuple(block.get("levels", [1, 2, 3]))
    metrics = run_replications(
        config,
        nsim=nsim,
        levels=levels,
        parallel=int(cfg["threads"]),
        reference_level=block.get("reference_level"),
        knots=int(block.get("knots", 5)),
        baseline_knots=int(block.get("baseline_knots", 15)),
        dump_dir=(out / "replicates") if block.get("dump_replicates", False) else None,
    )
    metrics.to_frame().to_csv(out / "metrics.csv", index=False)
    write_json(metrics.to_dict(), out / "metrics.json")
    for level, secs in sorted(metrics.cpu_seconds.items()):
        print(f"simulate: level {level} mean CPU {secs:.1f}s per fit", file=sys.stderr)
    print(
        f"simulate: {metrics.nsim - metrics.n_failed}/{metrics.nsim} replicates "
        f"succeeded -> {out}"
    )
    return 0


def cmd_compare(cfg: dict) -> int:
    block = _require(cfg, "compare", "compare")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = block.get("fits", [])
    if len(paths) < 2:
        raise ConfigError("compare block needs at least two fit.json paths under 'fits'")
    loaded = []
    for path in paths:
        result, doc = load_fit(path)
        loaded.append((Path(path), result, doc))
    fingerprints = {doc["data_fingerprint"] for _, _, doc in loaded}
    if len(fingerprints) != 1:
        raise DataError(
            "fits were produced from different datasets (fingerprint mismatch); "
            "comparison is undefined"
        )
    names = [
        block.get("names", [None] * len(loaded))[i] or p.parent.name or p.stem
        for i, (p, _, _) in enumerate(loaded)
    ]
    pairs = []
    for i in range(len(loaded)):
        for j in range(i + 1, len(loaded)):
            a, b = loaded[i][1], loaded[j][1]
            test = pairwise_waic_test(a.pointwise, b.pointwise)
            nl = min(a.n_longitudinal, b.n_longitudinal)
            d = a.pointwise.waic_contrib - b.pointwise.waic_contrib
            pairs.append(
                {
                    "a": names[i],
                    "b": names[j],
                    "delta_waic": a.waic - b.waic,
                    "delta_dic": a.dic - b.dic,
                    "delta_waic_longitudinal": float(d[:nl].sum()),
                    "delta_waic_survival": float(d[nl:].sum()),
                    "z": test.z,
                    "p": test.p,
                    "n": test.n,
                }
            )
    waics = [r.waic for _, r, _ in loaded]
    best = int(np.argmin(waics))
    report = {
        "fits": [
            {"name": names[i], "path": str(p), "waic": r.waic, "dic": r.dic}
            for i, (p, r, _) in enumerate(loaded)
        ],
        "pairs": pairs,
        "preferred": names[best],
        "preferred_significant": all(
            (pair["p"] < 0.05)
            for pair in pairs
            if names[best] in (pair["a"], pair["b"])
        ),
    }
    write_json(report, out / "compare.json")
    lines = [
        f"{'model A':>12} {'model B':>12} {'dWAIC':>10} {'dDIC':>10} {'z':>8} {'p':>10}"
    ]
    for pair in pairs:
        lines.append(
            f"{pair['a']:>12} {pair['b']:>12} {pair['delta_waic']:>10.2f} "
            f"{pair['delta_dic']:>10.2f} {pair['z']:>8.3f} {pair['p']:>10.3g}"
        )
    lines.append(
        f"preferred by WAIC: {names[best]}"
        + (" (all pairwise tests significant)" if report["preferred_significant"] else "")
    )
    table = "\n".join(lines) + "\n"
    (out / "compare.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_curve(cfg: dict) -> int:
    block = _require(cfg, "curve", "curve")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = block.get("fit")
    if not path:
        raise ConfigError("curve block needs a 'fit' path to a fit.json")
    result, doc = load_fit(path)
    components = block.get("components")
    indices = range(len(result.calibration.components)) if components is None else components
    for ci in indices:
        if not 0 <= int(ci) < len(result.calibration.components):
            raise ConfigError(f"unknown association component index {ci}")
        ci = int(ci)
        comp = result.calibration.components[ci]
        lo, hi = comp.domain
        grid_block = block.get("grid", {})
        grid = np.linspace(
            float(grid_block.get("min", lo)), float(grid_block.get("max", hi)),
            int(grid_block.get("points", 201)),
        )
        curve = posterior_curve(result, ci, grid=grid)
        summary = doc["association"][ci]["summary"]
        tag = _component_tag(ci, comp)
        write_curve_csv(out / f"curve_{tag}.csv", curve, summary)
        if bool(block.get("figures", True)):
            from .plots import association_figure

            association_figure(
                curve, summary, out / f"curve_{tag}.png",
                title=f"{comp.kind} association (level {int(comp.level)})",
            )
        print(f"curve: component {ci} ({comp.kind}) -> {out / ('curve_' + tag + '.csv')}")
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "curve": cmd_curve,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jointfit",
        description="Joint longitudinal-survival models with hierarchical "
        "non-linear association structures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(_load_config(args.config), args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, DataError, BasisError, CompareError, SimulationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NonConvergenceError as err:
        print(f"non-convergence: {err}", file=sys.stderr)
        return 2
    except InferenceError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
