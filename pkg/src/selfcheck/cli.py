"""Command-line pipeline: offline configuration stages and deployment checking.

Stages communicate through artifacts on disk under one run directory, so the
deployment stages can be re-run against a frozen configuration:

    fit-kde      train dump            -> RUN/bundle/
    infer-layers any dump              -> RUN/inference_<split>/
    select-alarm valid dump + infer    -> RUN/alarm.json
    select-advice valid dump + infer   -> RUN/advice.json
    check        test dump + configs   -> RUN/verdicts.jsonl, RUN/inference_<split>/
    evaluate     verdicts + test dump  -> RUN/report.json
    gamma-fit / binarize               -> RUN/gamma.json, RUN/<name>.u32
    synth-bench                        -> train/valid/test dumps

Every stage prints a one-line JSON summary to stdout and records input
fingerprints in RUN/provenance.json. Exit codes: 0 success, 1 data/validation
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kde_engine, metrics_eval
from .advice_selection import AdviceConfig, select_advice_layers
from .alarm_selection import AlarmConfig, SearchOptions, select_alarm_layers
from .deployment_checker import (
    read_verdicts_jsonl,
    verdict_from_inferred,
    verdict_wire_dict,
)
from .feature_store import DumpError, load_feature_dump
from .regression_adapter import GammaParams, binarize, fit_gamma
from .synth import save_synth_bench, synth_bench

_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class PipelineConfig:
    """Defaults shared by every stage; flag defaults are drawn from here."""

    train_dump: str | None = None
    valid_dump: str | None = None
    test_dump: str | None = None
    out_dir: str | None = None
    t_var: float = 1e-5
    epsilon: float = 0.05
    search: str = "exhaustive"
    max_subset_size: int | None = None
    time_budget_sec: float | None = None
    seed: int = 0


_DEFAULTS = PipelineConfig()


def _fingerprint(path: Path) -> str:
    """Stable content hash of a file or flat artifact directory."""
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    digest = hashlib.sha256()
    for child in sorted(p for p in path.iterdir() if p.is_file()):
        digest.update(child.name.encode())
        digest.update(hashlib.sha256(child.read_bytes()).digest())
    return digest.hexdigest()


def _record_provenance(run_dir: Path, stage: str, inputs: dict, outputs: list) -> None:
    prov_path = run_dir / "provenance.json"
    if prov_path.is_file():
        payload = json.loads(prov_path.read_text(encoding="utf-8"))
    else:
        payload = {"stages": {}}
    payload["stages"][stage] = {
        "inputs": {name: _fingerprint(Path(p)) for name, p in inputs.items()},
        "outputs": sorted(outputs),
    }
    prov_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _search_options(args) -> SearchOptions:
    return SearchOptions(
        search=args.search,
        max_subset_size=args.max_subset_size,
        time_budget_sec=args.time_budget_sec,
    )


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DumpError(f"missing {path}; run {hint} first")
    return path


def _inference_dir(run_dir: Path, split: str) -> Path:
    return run_dir / f"inference_{split}"


# -- stage handlers ----------------------------------------------------------


def _cmd_fit_kde(args) -> dict:
    run_dir = Path(args.run_dir)
    train = load_feature_dump(args.train)
    bundle = kde_engine.fit_kde(
        train, t_var=args.t_var, covariance_mode=args.covariance_mode
    )
    out = run_dir / "bundle"
    kde_engine.save_kde_bundle(bundle, out)
    _record_provenance(run_dir, "fit-kde", {"train": args.train}, ["bundle"])
    return {
        "stage": "fit-kde",
        "bundle": str(out),
        "n_layers": bundle.n_layers,
        "n_classes": bundle.n_classes,
        "t_var": bundle.t_var,
    }


def _cmd_infer_layers(args) -> dict:
    run_dir = Path(args.run_dir)
    bundle_dir = Path(args.bundle) if args.bundle else run_dir / "bundle"
    _require(bundle_dir, "fit-kde")
    bundle = kde_engine.load_kde_bundle(bundle_dir)
    fset = load_feature_dump(args.data)
    result = kde_engine.infer_layers(bundle, fset)
    out = _inference_dir(run_dir, fset.split_tag)
    kde_engine.save_inference(result, out)
    _record_provenance(
        run_dir,
        f"infer-layers-{fset.split_tag}",
        {"data": args.data, "bundle": str(bundle_dir)},
        [out.name],
    )
    return {
        "stage": "infer-layers",
        "split": fset.split_tag,
        "out": str(out),
        "n": result.n_instances,
    }


def _load_valid_inference(args, run_dir: Path):
    valid = load_feature_dump(args.valid)
    if valid.labels is None:
        raise DumpError("validation dump must carry labels")
    inf_dir = Path(args.inference) if args.inference else _inference_dir(run_dir, valid.split_tag)
    _require(inf_dir, "infer-layers")
    inference = kde_engine.load_inference(inf_dir)
    if inference.n_instances != valid.n_instances:
        raise DumpError(
            f"inference rows ({inference.n_instances}) != dump rows "
            f"({valid.n_instances})"
        )
    return valid, inference, inf_dir


def _cmd_select_alarm(args) -> dict:
    run_dir = Path(args.run_dir)
    valid, inference, inf_dir = _load_valid_inference(args, run_dir)
    cfg = select_alarm_layers(
        inference.classes,
        valid.labels,
        valid.predictions,
        valid.n_classes,
        _search_options(args),
    )
    out = run_dir / "alarm.json"
    cfg.save(out)
    _record_provenance(
        run_dir,
        "select-alarm",
        {"valid": args.valid, "inference": str(inf_dir)},
        ["alarm.json"],
    )
    return {
        "stage": "select-alarm",
        "out": str(out),
        "selected_layers": [list(c.selected_layers) for c in cfg.classes],
        "achieved_f1": [c.achieved_f1 for c in cfg.classes],
    }


def _cmd_select_advice(args) -> dict:
    run_dir = Path(args.run_dir)
    valid, inference, inf_dir = _load_valid_inference(args, run_dir)
    alarm_path = _require(run_dir / "alarm.json", "select-alarm")
    alarm_cfg = AlarmConfig.load(alarm_path)
    cfg = select_advice_layers(
        inference.classes,
        valid.labels,
        valid.predictions,
        alarm_cfg,
        valid.n_classes,
        _search_options(args),
        log_densities=inference.log_densities,
    )
    out = run_dir / "advice.json"
    cfg.save(out)
    _record_provenance(
        run_dir,
        "select-advice",
        {"valid": args.valid, "inference": str(inf_dir), "alarm": str(alarm_path)},
        ["advice.json"],
    )
    return {"stage": "select-advice", "out": str(out)}


def _cmd_check(args) -> dict:
    run_dir = Path(args.run_dir)
    bundle_dir = _require(run_dir / "bundle", "fit-kde")
    alarm_path = _require(run_dir / "alarm.json", "select-alarm")
    advice_path = _require(run_dir / "advice.json", "select-advice")
    bundle = kde_engine.load_kde_bundle(bundle_dir)
    alarm_cfg = AlarmConfig.load(alarm_path)
    advice_cfg = AdviceConfig.load(advice_path)
    fset = load_feature_dump(args.test)

    inference = kde_engine.infer_layers(bundle, fset)
    inf_out = _inference_dir(run_dir, fset.split_tag)
    kde_engine.save_inference(inference, inf_out)

    verdicts = [
        verdict_from_inferred(
            inference.classes[i], int(fset.predictions[i]), alarm_cfg, advice_cfg
        )
        for i in range(fset.n_instances)
    ]
    out = run_dir / "verdicts.jsonl"
    lines = [
        json.dumps(verdict_wire_dict(v, i), sort_keys=True)
        for i, v in enumerate(verdicts)
    ]
    out.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    _record_provenance(
        run_dir,
        "check",
        {
            "test": args.test,
            "bundle": str(bundle_dir),
            "alarm": str(alarm_path),
            "advice": str(advice_path),
        },
        ["verdicts.jsonl", inf_out.name],
    )
    n_alarms = sum(v.alarm for v in verdicts)
    return {
        "stage": "check",
        "out": str(out),
        "n": len(verdicts),
        "n_alarms": int(n_alarms),
    }


def _cmd_evaluate(args) -> dict:
    run_dir = Path(args.run_dir)
    fset = load_feature_dump(args.test)
    if fset.labels is None:
        raise DumpError("evaluation needs a labeled dump")
    verdict_path = _require(run_dir / "verdicts.jsonl", "check")
    records = read_verdicts_jsonl(verdict_path)
    if len(records) != fset.n_instances:
        raise DumpError(
            f"{len(records)} verdicts but {fset.n_instances} instances in the dump"
        )
    alarms = np.array([r["alarm"] for r in records], dtype=bool)

    counts = metrics_eval.confusion(alarms, fset.labels, fset.predictions)
    report = metrics_eval.rates(counts)
    composite = fset.predictions.copy()
    for i, r in enumerate(records):
        if r["alarm"]:
            composite[i] = r["advice"]
    adv_acc = (
        float(np.count_nonzero(composite == fset.labels)) / len(composite)
        if len(composite)
        else 0.0
    )

    # Layer-consistency delta over all layers, from the stored inference matrix.
    inf_dir = _require(_inference_dir(run_dir, fset.split_tag), "check")
    inference = kde_engine.load_inference(inf_dir)
    agreement = (inference.classes == fset.predictions[:, None]).mean(axis=1)
    correctness = (fset.labels == fset.predictions).astype(np.float64)
    try:
        rho, p = metrics_eval.spearman_consistency(correctness, agreement)
        spearman = {"rho": rho, "p": p}
    except ValueError:
        spearman = None

    payload = {
        "counts": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn},
        "tpr": report.tpr,
        "fpr": report.fpr,
        "f1": report.f1,
        "advice_accuracy": adv_acc,
        "spearman": spearman,
    }
    out = run_dir / "report.json"
    out.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    outputs = ["report.json"]
    if args.csv:
        tpr_pct, fpr_pct, f1_pct = report.as_percentages()
        header = "tag,tp,fp,tn,fn,tpr_pct,fpr_pct,f1_pct,advice_accuracy"
        row = (
            f"{args.tag},{counts.tp},{counts.fp},{counts.tn},{counts.fn},"
            f"{tpr_pct},{fpr_pct},{f1_pct},{adv_acc:.6f}"
        )
        Path(args.csv).write_text(header + "\n" + row + "\n", encoding="utf-8")
    _record_provenance(
        run_dir,
        "evaluate",
        {"test": args.test, "verdicts": str(verdict_path)},
        outputs,
    )
    summary = {"stage": "evaluate", "out": str(out)}
    summary.update(payload)
    return summary


def _read_f32_vector(path: str) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=_F32).astype(np.float64)


def _cmd_gamma_fit(args) -> dict:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    errors = _read_f32_vector(args.errors)
    params = fit_gamma(errors, epsilon=args.epsilon)
    payload = {
        "shape": params.shape,
        "scale": params.scale,
        "loc": params.loc,
        "epsilon": params.epsilon,
    }
    out = run_dir / "gamma.json"
    out.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _record_provenance(run_dir, "gamma-fit", {"errors": args.errors}, ["gamma.json"])
    summary = {"stage": "gamma-fit", "out": str(out)}
    summary.update(payload)
    return summary


def _cmd_binarize(args) -> dict:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    raw = json.loads(Path(args.params).read_text(encoding="utf-8"))
    params = GammaParams(
        shape=raw["shape"],
        scale=raw["scale"],
        loc=raw.get("loc", 0.0),
        epsilon=raw.get("epsilon", 0.05),
    )
    values = _read_f32_vector(args.values)
    flags = binarize(values, params, direction=args.direction)
    out = run_dir / f"{args.name}.u32"
    out.write_bytes(flags.astype("<u4").tobytes())
    _record_provenance(
        run_dir,
        "binarize",
        {"values": args.values, "params": args.params},
        [out.name],
    )
    return {
        "stage": "binarize",
        "out": str(out),
        "n": int(flags.size),
        "n_anomalies": int(flags.sum()),
    }


def _cmd_synth_bench(args) -> dict:
    bench = synth_bench(
        seed=args.seed,
        n_per_class=args.n_per_class,
        n_classes=args.classes,
        n_layers=args.layers,
        noise_layer_count=args.noise_layers,
        error_rate=args.error_rate,
    )
    paths = save_synth_bench(bench, args.out)
    return {
        "stage": "synth-bench",
        "seed": args.seed,
        "noise_layers": bench.noise_layers,
        "paths": paths,
    }


# -- parser ------------------------------------------------------------------


def _add_run_dir(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--out", dest="run_dir", help="run directory for artifacts")
    group.add_argument("--run", dest="run_dir", help="alias for --out")


def _add_search_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--search", choices=["exhaustive", "greedy"], default=_DEFAULTS.search
    )
    parser.add_argument("--max-subset-size", type=int, default=_DEFAULTS.max_subset_size)
    parser.add_argument("--time-budget-sec", type=float, default=_DEFAULTS.time_budget_sec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfcheck",
        description="Self-checking for deployed classifiers via layer densities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-kde", help="fit per-(layer, class) densities")
    p.add_argument("--train", required=True)
    p.add_argument("--t-var", type=float, default=_DEFAULTS.t_var)
    p.add_argument("--covariance-mode", choices=["full", "diag"], default="full")
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_fit_kde)

    p = sub.add_parser("infer-layers", help="per-layer inferred classes for a dump")
    p.add_argument("--data", required=True)
    p.add_argument("--bundle", default=None)
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_infer_layers)

    p = sub.add_parser("select-alarm", help="search alarm layer sets per class")
    p.add_argument("--valid", required=True)
    p.add_argument("--inference", default=None)
    _add_search_flags(p)
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_select_alarm)

    p = sub.add_parser("select-advice", help="search advice layer sets and weights")
    p.add_argument("--valid", required=True)
    p.add_argument("--inference", default=None)
    _add_search_flags(p)
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_select_advice)

    p = sub.add_parser("check", help="alarm + advice verdicts for a test dump")
    p.add_argument("--test", required=True)
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_check)

    p = sub.add_parser("evaluate", help="confusion metrics for stored verdicts")
    p.add_argument("--test", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--tag", default="run")
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("gamma-fit", help="fit a Gamma distribution to errors")
    p.add_argument("--errors", required=True, help="raw little-endian float32 vector")
    p.add_argument("--epsilon", type=float, default=_DEFAULTS.epsilon)
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_gamma_fit)

    p = sub.add_parser("binarize", help="flag anomalies against a fitted Gamma")
    p.add_argument("--values", required=True, help="raw little-endian float32 vector")
    p.add_argument("--params", required=True, help="gamma.json from gamma-fit")
    p.add_argument("--direction", choices=["above", "below"], default="above")
    p.add_argument("--name", default="anomalies")
    _add_run_dir(p)
    p.set_defaults(handler=_cmd_binarize)

    p = sub.add_parser("synth-bench", help="generate the synthetic benchmark dumps")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=2000)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--noise-layers", type=int, default=1)
    p.add_argument("--error-rate", type=float, default=0.12)
    p.set_defaults(handler=_cmd_synth_bench)

    return parser


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "run_dir", None):
        Path(args.run_dir).mkdir(parents=True, exist_ok=True)
    try:
        summary = args.handler(args)
    except (DumpError, ValueError, OSError) as exc:
        print(f"selfcheck: error: {exc}", file=sys.stderr)
        return 1
    _emit(summary)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
