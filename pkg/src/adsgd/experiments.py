"""Experiment orchestration: sweeps, per-run files, aggregates, bound reports and plot data.

Layout of one experiment directory::

    <out>/<name>/manifest.json       spec echo and the planned run ids
    <out>/<name>/runs/<id>.csv       per-iteration metrics (or per-sample gaps)
    <out>/<name>/runs/<id>.json      run summary
    <out>/<name>/aggregate.csv       one row per run
    <out>/<name>/time_to_target.csv  when analysis.target_reference is set
    <out>/<name>/bound_report.json   when analysis.bounds is set
"""
from __future__ import annotations

import csv
import functools
import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .analysis import (
    MIN_SEEDS,
    BoundError,
    BoundInputs,
    InsufficientSignalError,
    consensus_noise_constants,
    estimate_staleness_gamma,
    lemma_consensus_bound,
    measure_oracle_on_trace,
    theorem_terms,
    verify_lemma2_on_trace,
)
from .compute import LossTask
from .config import ExperimentSpec, parse_config
from .engine import CSV_FIELDS, MetricsRecord, RunResult, run
from .mixing import estimate_consensus_rate, sample_spectral_gaps

DEFAULT_OUT = "adsgd-results"
OUT_ENV = "ADSGD_OUT"
FIGURES = ("fig2", "fig3", "fig4")
FIGURE_COLUMNS = {
    "fig2": ("topology", "delay_tolerance", "mean_gap", "stderr"),
    "fig3": ("h_min", "wall_clock_s", "accuracy", "stderr"),
    "fig4": ("t_max", "scheduler", "wall_clock_s", "accuracy", "stderr"),
}
PLOT_POINTS = 101
ORACLE_RUNS = 3


class OutputExistsError(FileExistsError):
    pass


class RunFailure(RuntimeError):
    pass


class MissingRunsError(FileNotFoundError):
    pass


# -- presets -----------------------------------------------------------------

def _fig2() -> ExperimentSpec:
    return ExperimentSpec.model_validate({
        "name": "fig2",
        "kind": "spectral-gap",
        "topology": {"node_count": 9, "failure": "delay-tolerance", "link_time_rate": 1.0},
        "analysis": {"gap_samples": 2000},
        "sweep": {
            "topology.kind": ["complete-mesh", "torus-2d", "ring"],
            "topology.delay_tolerance": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        },
        "seeds": [0],
    })


_LOGISTIC = {
    "task": "logistic", "dimension": 10, "samples_per_device": 200, "separation": 0.5,
    "label_skew": 0.8, "anisotropy": 5.0, "batch_size": 16,
    "straggler_mode": "timing-derived", "t_min": 0.25, "mu": 1.0,
}


def _fig3() -> ExperimentSpec:
    return ExperimentSpec.model_validate({
        "name": "fig3",
        "topology": {"kind": "complete-mesh", "node_count": 15, "failure": "gain-threshold"},
        "channel": {"noise_std": 0.01},
        "compute": _LOGISTIC,
        "engine": {"iterations": 400, "zeta": 0.5, "eta": 0.02, "scheduler": "async", "t_max": 1.0},
        "analysis": {"target_reference": {"topology.h_min": 0.5}},
        "sweep": {"topology.h_min": [0.5, 1.5, 2.0]},
        "seeds": list(range(10)),
    })


def _fig4() -> ExperimentSpec:
    # E[T_comp] = t_min + mu = 1.25 s; the two barriers are E[T_comp] and 4/5 of it.
    return ExperimentSpec.model_validate({
        "name": "fig4",
        "topology": {"kind": "complete-mesh", "node_count": 15, "failure": "gain-threshold", "h_min": 0.5},
        "channel": {"noise_std": 0.01},
        "compute": _LOGISTIC,
        "engine": {"iterations": 4000, "zeta": 0.5, "eta": 0.02, "t_max": 1.0, "wall_budget": 1000.0},
        "analysis": {"target_reference": {"engine.scheduler": "sync"}},
        "sweep": {"engine.scheduler": ["async", "sync-barrier", "sync"], "engine.t_max": [1.0, 1.25]},
        "seeds": list(range(10)),
    })


PRESETS = {
    "fig2": (_fig2, "average spectral gap vs delay tolerance; 9-node mesh, torus and ring, Exp(1) link times"),
    "fig3": (_fig3, "async accuracy vs wall clock for three channel-gain thresholds h_min"),
    "fig4": (_fig4, "async vs sync-barrier vs sync accuracy vs wall clock at T_max in {1.0, 1.25} s"),
}


def preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESETS[name][0]()


def load_spec(source: str) -> ExperimentSpec:
    """A preset name or a path to a JSON config."""
    return preset(source) if source in PRESETS else parse_config(source)


# -- planning ----------------------------------------------------------------

@dataclass(frozen=True)
class PlannedRun:
    run_id: str
    index: int
    point: dict[str, Any]
    seed: int
    spec: ExperimentSpec


def plan_runs(spec: ExperimentSpec, seed_offset: int = 0) -> list[PlannedRun]:
    runs = []
    for pi, point in enumerate(spec.grid()):
        sub = spec.at(point)
        for seed in spec.seeds:
            s = seed + seed_offset
            runs.append(PlannedRun(f"p{pi:03d}_s{s}", pi, point, s, sub))
    return runs


def output_root(out: str | os.PathLike | None = None, spec: ExperimentSpec | None = None) -> Path:
    if out is not None:
        return Path(out)
    if spec is not None and spec.output:
        return Path(spec.output)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


# -- execution ---------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _task_for(compute_json: str, m: int) -> LossTask:
    from .config import ComputeSection

    return ComputeSection.model_validate_json(compute_json).build_task(m)


def build_components(spec: ExperimentSpec):
    """Task, oracle, base topology, failure model, channel config and straggler model."""
    m = spec.topology.node_count
    task = _task_for(spec.compute.model_dump_json(), m)
    return (
        task,
        spec.compute.oracle(task),
        spec.topology.base(),
        spec.topology.failure_model(),
        spec.channel.channel_config(),
        spec.compute.straggler_model(m),
    )


def execute_train(planned: PlannedRun, keep_trace: bool = False) -> RunResult:
    task, oracle, base, failure, chan, straggler = build_components(planned.spec)
    return run(planned.spec.engine.run_config(planned.seed, keep_trace), oracle, base, failure, chan, straggler)


def execute_gaps(planned: PlannedRun) -> np.ndarray:
    top = planned.spec.topology
    return sample_spectral_gaps(top.base(), top.failure_model(), planned.spec.analysis.gap_samples, planned.seed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _run_summary(planned: PlannedRun, result: RunResult) -> dict:
    task, *_ = build_components(planned.spec)
    last = result.records[-1]
    return {
        "run_id": planned.run_id,
        "seed": planned.seed,
        "point": planned.point,
        "final": {k: getattr(last, k) for k in CSV_FIELDS},
        "average_grad_norm_sq": result.average_grad_norm_sq(),
        "constants": {"L": task.smoothness, "eta": result.etas, "zeta": result.zeta, "f_star": task.f_star},
        "config": planned.spec.model_dump(mode="json"),
    }


def _execute_and_write(planned: PlannedRun, run_dir: Path, keep_trace: bool):
    """Worker body: run one configuration and write its files. Returns what the parent aggregates."""
    try:
        if planned.spec.kind == "spectral-gap":
            gaps = execute_gaps(planned)
            _write_csv(run_dir / f"{planned.run_id}.csv", ("sample", "gap"), enumerate(gaps))
            stats = {"mean_gap": float(gaps.mean()), "stderr": float(gaps.std(ddof=1) / math.sqrt(len(gaps))) if len(gaps) > 1 else 0.0}
            _write_json(run_dir / f"{planned.run_id}.json", {"run_id": planned.run_id, "seed": planned.seed, "point": planned.point, **stats})
            return stats
        result = execute_train(planned, keep_trace)
        _write_csv(run_dir / f"{planned.run_id}.csv", CSV_FIELDS, (r.as_row() for r in result.records))
        _write_json(run_dir / f"{planned.run_id}.json", _run_summary(planned, result))
        return result if keep_trace else RunResult(result.records, [], result.etas, result.zeta)
    except Exception as exc:
        raise RunFailure(
            f"run {planned.run_id} failed: {type(exc).__name__}: {exc}\n"
            f"config: {planned.spec.model_dump_json()}\nseed: {planned.seed}"
        ) from exc


@dataclass
class ExperimentOutcome:
    path: Path
    runs: list[PlannedRun]
    results: dict[str, Any]
    time_to_target: list[dict] = field(default_factory=list)
    bound_report: dict | None = None


def run_experiment(
    spec: ExperimentSpec,
    out: str | os.PathLike | None = None,
    force: bool = False,
    workers: int = 1,
    seed_offset: int = 0,
    bounds: bool | None = None,
    log=None,
) -> ExperimentOutcome:
    """Execute every (sweep point, seed) run and write the experiment directory.

    Refuses to touch a non-empty existing directory unless ``force`` is set,
    in which case the directory is replaced. Output bytes depend only on the
    spec, seeds and offset (not on ``workers``).
    """
    bounds = spec.analysis.bounds if bounds is None else bounds
    if bounds and spec.kind != "train":
        raise ValueError("bound checks need a 'train' experiment")
    exp_dir = output_root(out, spec) / spec.name
    if exp_dir.exists() and any(exp_dir.iterdir()):
        if not force:
            raise OutputExistsError(f"{exp_dir} already holds results; pass --force to overwrite")
        shutil.rmtree(exp_dir)
    run_dir = exp_dir / "runs"
    run_dir.mkdir(parents=True)

    planned = plan_runs(spec, seed_offset)
    if log:
        log(f"{spec.name}: {len(spec.grid())} sweep point(s) x {len(spec.seeds)} seed(s) = {len(planned)} runs")
    _write_json(exp_dir / "manifest.json", {
        "name": spec.name,
        "kind": spec.kind,
        "seed_offset": seed_offset,
        "runs": [{"run_id": p.run_id, "point": p.point, "seed": p.seed} for p in planned],
        "spec": spec.model_dump(mode="json"),
    })

    if workers > 1 and len(planned) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_execute_and_write, p, run_dir, bounds) for p in planned]
            outputs = [f.result() for f in futures]
    else:
        outputs = []
        for k, p in enumerate(planned):
            outputs.append(_execute_and_write(p, run_dir, bounds))
            if log:
                log(f"  [{k + 1}/{len(planned)}] {p.run_id} done")
    results = {p.run_id: o for p, o in zip(planned, outputs)}

    keys = sorted(spec.sweep)
    if spec.kind == "spectral-gap":
        rows = [[p.run_id, *(p.point[k] for k in keys), p.seed, results[p.run_id]["mean_gap"], results[p.run_id]["stderr"]] for p in planned]
        _write_csv(exp_dir / "aggregate.csv", ("run_id", *keys, "seed", "mean_gap", "stderr"), rows)
        return ExperimentOutcome(exp_dir, planned, results)

    rows = []
    for p in planned:
        r = results[p.run_id]
        last = r.records[-1]
        rows.append([p.run_id, *(p.point[k] for k in keys), p.seed, last.t, last.wall_clock_s, last.loss, last.acc,
                     last.consensus_dist, r.average_grad_norm_sq(), float(np.mean(r.column("stragglers")[1:])) if last.t else 0.0])
    _write_csv(exp_dir / "aggregate.csv",
               ("run_id", *keys, "seed", "iterations", "wall_clock_s", "loss", "acc", "consensus_dist", "avg_grad_norm_sq", "mean_stragglers"),
               rows)

    outcome = ExperimentOutcome(exp_dir, planned, results)
    if spec.analysis.target_reference:
        outcome.time_to_target = time_to_target_table(spec, planned, results)
        _write_csv(exp_dir / "time_to_target.csv", ("run_id", *keys, "seed", "target", "time_to_target"),
                   ([row["run_id"], *(row["point"][k] for k in keys), row["seed"], row["target"], row["time_to_target"]]
                    for row in outcome.time_to_target))
    if bounds:
        outcome.bound_report = bound_report(spec, planned, results)
        _write_json(exp_dir / "bound_report.json", outcome.bound_report)
    return outcome


# -- time to target ----------------------------------------------------------

def time_to_target(records: Sequence[MetricsRecord], target: float) -> float:
    """First simulated wall-clock time at which accuracy reaches ``target`` (inf if never)."""
    for r in records:
        if r.acc >= target:
            return r.wall_clock_s
    return math.inf


def time_to_target_table(spec: ExperimentSpec, planned: Sequence[PlannedRun], results: dict) -> list[dict]:
    """Per run: the target (quantile of the matched reference run's accuracy trace) and time to reach it.

    The reference of a run is the run with the same seed whose sweep point
    equals the run's point overridden by ``analysis.target_reference``.
    """
    ref_sel = spec.analysis.target_reference or {}
    q = spec.analysis.target_quantile
    by_key = {(json.dumps(p.point, sort_keys=True), p.seed): p.run_id for p in planned}
    table = []
    for p in planned:
        ref_point = {**p.point, **ref_sel}
        ref_id = by_key.get((json.dumps(ref_point, sort_keys=True), p.seed))
        if ref_id is None:
            raise ValueError(f"no reference run for {p.run_id} with point {ref_point}")
        acc = results[ref_id].column("acc")
        target = float(np.quantile(acc[np.isfinite(acc)], q))
        table.append({"run_id": p.run_id, "point": p.point, "seed": p.seed, "reference": ref_id, "target": target,
                      "time_to_target": time_to_target(results[p.run_id].records, target)})
    return table


# -- bound checks ------------------------------------------------------------

def bound_report(spec: ExperimentSpec, planned: Sequence[PlannedRun], results: dict) -> dict:
    """Measured constants, consensus and stationarity bounds per sweep point."""
    report = {"name": spec.name, "points": [], "holds": True}
    for pi, point in enumerate(spec.grid()):
        group = [p for p in planned if p.index == pi]
        entry = point_bound_report(group[0].spec, [results[p.run_id] for p in group])
        entry["point"] = point
        report["points"].append(entry)
        report["holds"] = report["holds"] and entry["holds"]
    return report


def point_bound_report(spec: ExperimentSpec, results: Sequence[RunResult]) -> dict:
    task, oracle, base, failure, _, straggler = build_components(spec)
    an = spec.analysis
    rate = estimate_consensus_rate(base, failure, an.consensus_samples, an.probe_count, seed=0)
    sigma2, G2 = measure_oracle_on_trace(oracle, list(results[:ORACLE_RUNS]), an.oracle_samples, seed=0)
    sigma2_w = consensus_noise_constants(results)
    try:
        gamma = estimate_staleness_gamma(list(results), task)
        gamma_val, skipped = gamma.gamma, list(gamma.skipped)
    except InsufficientSignalError as exc:
        gamma_val, skipped = None, str(exc)
    T = min(len(r.records) for r in results) - 1
    f0 = float(np.mean([task.loss(r.trace.models[0].mean(axis=0)) for r in results]))
    f_star = task.f_star
    inputs = BoundInputs(
        p=rate.p_hat, zeta=results[0].zeta, eta=float(np.max(results[0].etas)), m=task.m, G2=G2, sigma2=sigma2,
        sigma2_w=sigma2_w, L=task.smoothness, gamma=gamma_val or 0.0, rho=straggler.rho, T=max(T, 1),
        f0=f0, f_star=f_star if f_star is not None else float("nan"),
    )
    entry = {
        "constants": {**inputs.as_dict(), "q_hat": rate.q_hat, "delta_hat": rate.delta_hat, "gamma_skipped": skipped},
        "num_seeds": len(results),
        "holds": True,
    }

    if len(results) >= MIN_SEEDS:
        lem = verify_lemma2_on_trace(results, inputs)
        entry["consensus"] = lem.as_dict()
        entry["holds"] = entry["holds"] and lem.holds
    else:
        entry["consensus"] = {"skipped": f"needs at least {MIN_SEEDS} seeds, got {len(results)}",
                           "bound": lemma_consensus_bound(inputs)}

    if gamma_val is None or f_star is None:
        entry["stationarity"] = {"skipped": "staleness constant or f* unavailable for this task"}
    else:
        try:
            terms = theorem_terms(inputs)
        except BoundError as exc:
            entry["stationarity"] = {"skipped": str(exc)}
        else:
            emp = np.array([r.average_grad_norm_sq() for r in results])
            se = float(emp.std(ddof=1) / math.sqrt(len(emp))) if len(emp) > 1 else 0.0
            bound = float(sum(terms.values()))
            margin = bound + 3.0 * se - float(emp.mean())
            entry["stationarity"] = {"terms": terms, "bound": bound, "empirical_mean": float(emp.mean()), "stderr": se,
                                "margin": margin, "holds": bool(margin >= 0),
                                "theorem_schedule": spec.engine.eta == "theorem" and spec.engine.zeta == "theorem"}
            entry["holds"] = entry["holds"] and margin >= 0
    entry["staleness_assumption_violated"] = gamma_val is not None and gamma_val > 1
    return entry


# -- plot data ---------------------------------------------------------------

def _load_manifest(exp_dir: Path) -> dict:
    path = exp_dir / "manifest.json"
    if not path.exists():
        raise MissingRunsError(f"{exp_dir}: 0 completed runs (no manifest.json)")
    return json.loads(path.read_text(encoding="utf-8"))


def completed_runs(exp_dir: Path) -> tuple[list[dict], list[str]]:
    manifest = _load_manifest(exp_dir)
    done, missing = [], []
    for entry in manifest["runs"]:
        (done if (exp_dir / "runs" / f"{entry['run_id']}.csv").exists() else missing).append(entry)
    return done, [e["run_id"] for e in missing]


def _step_mean(curves: list[tuple[np.ndarray, np.ndarray]], points: int = PLOT_POINTS):
    """Mean and standard error across runs of step-interpolated y(x) on a shared grid."""
    horizon = min(x[-1] for x, _ in curves)
    grid = np.linspace(0.0, horizon, points)
    ys = np.array([y[np.searchsorted(x, grid, side="right") - 1] for x, y in curves])
    mean = ys.mean(axis=0)
    se = ys.std(axis=0, ddof=1) / math.sqrt(len(ys)) if len(ys) > 1 else np.zeros_like(mean)
    return grid, mean, se


def emit_plotdata(exp_dir: str | os.PathLike, figure: str, dest: str | os.PathLike | None = None) -> Path:
    """Write ``<figure>.csv`` (tidy, one row per series point) from a finished experiment."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    exp_dir = Path(exp_dir)
    done, missing = completed_runs(exp_dir)
    if not done:
        raise MissingRunsError(f"{exp_dir}: 0 completed runs")
    if missing:
        raise MissingRunsError(f"{exp_dir}: {len(missing)} run(s) absent: {', '.join(missing)}")
    dest = Path(dest) if dest is not None else exp_dir / f"{figure}.csv"

    def series_of(entry) -> tuple:
        pt = entry["point"]
        try:
            if figure == "fig2":
                return (pt["topology.kind"], float(pt["topology.delay_tolerance"]))
            if figure == "fig3":
                return (float(pt["topology.h_min"]),)
            return (float(pt["engine.t_max"]), pt["engine.scheduler"])
        except KeyError as exc:
            raise ValueError(f"experiment in {exp_dir} does not sweep {exc} needed for {figure}") from exc

    groups: dict[tuple, list[dict]] = {}
    for entry in done:
        groups.setdefault(series_of(entry), []).append(entry)

    rows = []
    for key in sorted(groups):
        entries = groups[key]
        if figure == "fig2":
            gaps = np.concatenate([
                np.array([float(r["gap"]) for r in _read_csv(exp_dir / "runs" / f"{e['run_id']}.csv")]) for e in entries
            ])
            se = gaps.std(ddof=1) / math.sqrt(len(gaps)) if len(gaps) > 1 else 0.0
            rows.append([*key, gaps.mean(), se])
            continue
        curves = []
        for e in entries:
            recs = _read_csv(exp_dir / "runs" / f"{e['run_id']}.csv")
            curves.append((np.array([float(r["wall_clock_s"]) for r in recs]), np.array([float(r["acc"]) for r in recs])))
        for x, y, s in zip(*_step_mean(curves)):
            rows.append([*key, x, y, s])
    _write_csv(dest, FIGURE_COLUMNS[figure], rows)
    return dest


def load_run_records(exp_dir: str | os.PathLike, run_id: str) -> list[MetricsRecord]:
    rows = _read_csv(Path(exp_dir) / "runs" / f"{run_id}.csv")
    return [
        MetricsRecord(int(r["t"]), float(r["wall_clock_s"]), float(r["consensus_dist"]), float(r["grad_norm_sq"]),
                      float(r["loss"]), float(r["acc"]), int(r["stragglers"]), r["connected"] == "1")
        for r in rows
    ]
