"""Experiment orchestration, report files and report comparison."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_to_dict
from .metrics import (
    average_accuracy,
    backward_transfer,
    corruption_errors,
    corruption_scores,
    flat_minima_probe,
    forward_transfer,
    model_ece,
    noisy_label_probe,
    softmax_np,
    task_bias,
)
from .model import NetworkConfig
from .streams import (
    Dataset,
    ScenarioStream,
    build_class_il,
    build_general_il,
    build_rotated_domain_il,
    load_dataset_pair,
)
from .trainers import Method, RunResult, run_experiment

SUMMARY_COLUMNS = ["seed", "method", "scenario", "buffer", "avg_acc", "fwt", "bwt", "ece"]


class ReportMismatchError(ValueError):
    pass


def build_scenario(cfg: ExperimentConfig, seed: int) -> ScenarioStream:
    sc = cfg.scenario
    train, test = load_dataset_pair(sc.dataset, sc.num_classes, sc.train_per_class, sc.test_per_class,
                                    sc.image_size, seed)
    if sc.kind == "class_il":
        return build_class_il(train, test, sc.classes_per_task, seed)
    if sc.kind == "domain_il":
        return build_rotated_domain_il(train, test, sc.n_tasks, seed, sc.samples_per_task, sc.test_per_task)
    return build_general_il(train, test, sc.rounds, seed, sc.samples_per_segment, sc.test_per_segment)


def network_config(cfg: ExperimentConfig, scenario: ScenarioStream) -> NetworkConfig:
    H, W = scenario.train.image_shape
    n = cfg.network
    return NetworkConfig(H * W, list(n.hidden_dims), scenario.num_classes, n.ssl_proj_dim, batch_norm=n.batch_norm)


def _union(scenario: ScenarioStream, split: str) -> Dataset:
    parts = [scenario.task_data(t, split) for t in range(scenario.num_tasks)]
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), scenario.num_classes)


def _transfer(R: List[List[float]], baseline: List[float]):
    square = len(R) == len(R[0]) and len(R) >= 2
    if not square:
        return None, None
    return forward_transfer(R, baseline), backward_transfer(R)


def _train(cfg: ExperimentConfig, method: str, seed: int, scenario: ScenarioStream) -> RunResult:
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    return run_experiment(method, scenario, train_cfg, network_config(cfg, scenario))


def evaluate_run(cfg: ExperimentConfig, result: RunResult, scenario: ScenarioStream, seed: int,
                 corruption_reference: Optional[RunResult] = None) -> dict:
    """Raw per-seed payload: accuracy matrix plus every enabled probe."""
    R = result.accuracy_matrix
    fwt, bwt = _transfer(R, result.random_baseline)
    m = cfg.metrics
    net = result.net
    test = _union(scenario, "test")
    payload: dict = {
        "seed": seed,
        "accuracy_matrix": R,
        "random_baseline": result.random_baseline,
        "avg_acc": average_accuracy(R),
        "fwt": fwt if m.transfer else None,
        "bwt": bwt if m.transfer else None,
        "task_steps": [
            {"task": s.task_id, "total": s.total_steps, "agnostic": s.agnostic_steps, "specific": s.specific_steps}
            for s in result.task_stats
        ],
        "metrics": {},
    }
    out = payload["metrics"]
    if m.ece:
        value, bins = model_ece(net, test.images, test.labels, m.ece_bins)
        out["ece"] = {"value": value, "bins": bins.rows()}
    if m.corruption:
        rng = np.random.default_rng([seed, 99])
        idx = np.sort(rng.permutation(len(test))[: m.corruption_test_samples])
        images, labels = test.images[idx], test.labels[idx]

        def clean_err(n):
            n.eval()
            e = float(np.mean(np.argmax(n.predict_logits(images), axis=1) != labels))
            n.train()
            return e

        errors = corruption_errors(net, images, labels, seed)
        ref = corruption_reference or result
        ref_errors = errors if ref is result else corruption_errors(ref.net, images, labels, seed)
        ce_clean, ref_clean = clean_err(net), clean_err(ref.net)
        mce, rel = corruption_scores(errors, ref_errors, ce_clean, ref_clean)
        out["corruption"] = {
            "baseline_method": ref.method,
            "errors": errors,
            "clean_error": ce_clean,
            "baseline_errors": ref_errors,
            "baseline_clean_error": ref_clean,
            "mce": mce,
            "relative_mce": rel,
        }
    if m.flatness:
        train = _union(scenario, "train")
        curve = flat_minima_probe(net, train.images, train.labels, m.sigma_grid, m.flatness_trials, seed)
        out["flatness"] = {"sigma": list(m.sigma_grid), "accuracy": curve}
    if m.bias and scenario.scenario == "class_il":
        net.eval()
        probs = softmax_np(net.predict_logits(test.images))
        net.train()
        out["bias"] = task_bias(probs, scenario.task_class_map()).tolist()
    if m.noisy_label:
        train = _union(scenario, "train")
        curve = noisy_label_probe(net, train, test, m.noise_rates, m.probe_epochs, cfg.train.learning_rate, seed)
        out["noisy_label"] = {"rates": list(m.noise_rates), "accuracy": curve}
    return payload


def _agg(values: Sequence[Optional[float]]) -> Optional[dict]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def aggregate(runs: List[dict]) -> dict:
    return {
        "avg_acc": _agg([r["avg_acc"] for r in runs]),
        "fwt": _agg([r["fwt"] for r in runs]),
        "bwt": _agg([r["bwt"] for r in runs]),
        "ece": _agg([r["metrics"].get("ece", {}).get("value") for r in runs]),
    }


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


def write_report(path: Path, report: dict, wall_clock: float) -> None:
    # wall clock sits on the last line so byte comparisons can drop it
    body = _dump(report)
    text = body[:-2] + f',\n  "wall_clock_seconds": {wall_clock:.3f}\n}}\n'
    path.write_text(text)


def run(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> Dict[str, Path]:
    """Run every method for every seed; write reports, summary and probe CSVs."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}
    reports: Dict[str, dict] = {}
    references: Dict[int, RunResult] = {}
    scenarios: Dict[int, ScenarioStream] = {}
    timers: Dict[str, float] = {}

    for seed in cfg.seeds:
        scenarios[seed] = build_scenario(cfg, seed)
    scenario_desc = scenarios[cfg.seeds[0]].describe()
    scenario_desc.pop("seed")

    for method in cfg.methods:
        start = time.perf_counter()
        runs = []
        for seed in cfg.seeds:
            scenario = scenarios[seed]
            try:
                result = _train(cfg, method, seed, scenario)
                ref = None
                if cfg.metrics.corruption and method != "er":
                    if seed not in references:
                        references[seed] = _train(cfg, "er", seed, scenario)
                    ref = references[seed]
                elif method == "er":
                    references[seed] = result
                runs.append(evaluate_run(cfg, result, scenario, seed, ref))
            except Exception as exc:
                exc.run_context = {"method": method, "seed": seed}  # type: ignore[attr-defined]
                raise
        reports[method] = {
            "version": __version__,
            "method": method,
            "scenario": {"kind": cfg.scenario.kind, "tasks": scenario_desc["tasks"]},
            "config": config_to_dict(cfg),
            "seeds": list(cfg.seeds),
            "runs": runs,
            "aggregate": aggregate(runs),
        }
        timers[method] = time.perf_counter() - start
        path = out / f"report_{_slug(method)}.json"
        write_report(path, reports[method], timers[method])
        written[method] = path

    written["summary"] = write_summary(out / "summary.csv", cfg, reports)
    written.update(write_probe_csvs(out, reports))
    scenarios[cfg.seeds[0]].export_json(out / "scenario.json")
    return written


def _slug(method: str) -> str:
    return method.replace("+", "_")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def summary_rows(reports: Dict[str, dict]) -> List[dict]:
    rows = []
    for method, rep in reports.items():
        buffer = rep["config"]["train"]["buffer_capacity"] if Method.parse(method).uses_replay else 0
        for r in rep["runs"]:
            rows.append({
                "seed": r["seed"],
                "method": method,
                "scenario": rep["scenario"]["kind"],
                "buffer": buffer,
                "avg_acc": _fmt(r["avg_acc"]),
                "fwt": _fmt(r["fwt"]),
                "bwt": _fmt(r["bwt"]),
                "ece": _fmt(r["metrics"].get("ece", {}).get("value")),
            })
    return rows


def write_summary(path: Path, cfg: ExperimentConfig, reports: Dict[str, dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for row in summary_rows(reports):
            w.writerow(row)
    return path


def write_probe_csvs(out: Path, reports: Dict[str, dict]) -> Dict[str, Path]:
    tables: Dict[str, List[list]] = {}
    headers = {
        "reliability": ["method", "seed", "lower", "upper", "count", "confidence", "accuracy"],
        "flatness": ["method", "seed", "sigma", "accuracy"],
        "noisy_label": ["method", "seed", "noise_rate", "accuracy"],
        "task_bias": ["method", "seed", "task", "mass"],
        "corruption": ["method", "seed", "kind", "severity", "error", "baseline_error"],
    }
    for method, rep in reports.items():
        for r in rep["runs"]:
            m, s = r["metrics"], r["seed"]
            if "ece" in m:
                tables.setdefault("reliability", []).extend(
                    [method, s, b["lower"], b["upper"], b["count"], b["confidence"], b["accuracy"]] for b in m["ece"]["bins"]
                )
            if "flatness" in m:
                tables.setdefault("flatness", []).extend(
                    [method, s, sg, a] for sg, a in zip(m["flatness"]["sigma"], m["flatness"]["accuracy"])
                )
            if "noisy_label" in m:
                tables.setdefault("noisy_label", []).extend(
                    [method, s, nr, a] for nr, a in zip(m["noisy_label"]["rates"], m["noisy_label"]["accuracy"])
                )
            if "bias" in m:
                tables.setdefault("task_bias", []).extend([method, s, t, v] for t, v in enumerate(m["bias"]))
            if "corruption" in m:
                c = m["corruption"]
                tables.setdefault("corruption", []).extend(
                    [method, s, kind, sev + 1, e, c["baseline_errors"][kind][sev]]
                    for kind, errs in c["errors"].items() for sev, e in enumerate(errs)
                )
    written = {}
    for name, rows in tables.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(headers[name])
            w.writerows(rows)
        written[name] = path
    return written


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def compare(paths: Sequence, output: Optional[str] = None) -> Dict[str, Path]:
    """Side-by-side aggregates with deltas against the first report (CSV and markdown)."""
    reports = [load_report(p) for p in paths]
    if not reports:
        raise ValueError("compare needs at least one report")
    ref_scenario = reports[0]["scenario"]
    for p, rep in zip(paths, reports):
        if rep["scenario"] != ref_scenario:
            raise ReportMismatchError(f"{p}: scenario differs from {paths[0]}")
    keys = ["avg_acc", "fwt", "bwt", "ece"]

    def mean(rep, k):
        a = rep["aggregate"].get(k)
        return None if a is None else a["mean"]

    header = ["method"] + [f"{k}_mean" for k in keys] + [f"{k}_std" for k in keys] + [f"delta_{k}" for k in keys]
    rows = []
    for rep in reports:
        row = [rep["method"]]
        row += [mean(rep, k) for k in keys]
        row += [None if rep["aggregate"].get(k) is None else rep["aggregate"][k]["std"] for k in keys]
        for k in keys:
            a, b = mean(rep, k), mean(reports[0], k)
            row.append(None if a is None or b is None else a - b)
        rows.append(row)
    out = Path(output) if output else Path(paths[0]).parent / "comparison.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[_cell(v) for v in r] for r in rows])
    md = out.with_suffix(".md")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_cell(v, 4) for v in r) + " |" for r in rows]
    md.write_text("\n".join(lines) + "\n")
    return {"csv": out, "markdown": md}


def _cell(v, digits: Optional[int] = None) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return f"{v:.{digits}f}" if digits else repr(float(v))
