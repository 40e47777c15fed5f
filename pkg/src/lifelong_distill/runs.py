"""On-disk layout for datasets and runs: generation, training, evaluation, reports.

Layout under ``out``::

    data/data_manifest.json  suite.json  task_<id>.jsonl
    <method>/seed_<s>/manifest.json  train_log.jsonl  success.csv  drift.csv
                      metrics.csv  checkpoints/step<k>_epoch<e>.npz
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config, load_config
from .metrics import (DriftRecord, SuccessTensor, compute_metrics, latent_drift, mean_and_stderr,
                      rollout_success)
from .policy import MODALITIES, load_checkpoint
from .sim import (TaskSuite, Trajectory, collect_demos, derive_seed, make_suite, read_suite,
                  read_trajectories, write_suite, write_trajectories)
from .trainer import run_lifelong

log = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1
DATA_DIR = "data"
DATA_MANIFEST = "data_manifest.json"
MANIFEST = "manifest.json"
LOCK = ".lock"
SUCCESS_FIELDS = ("format_version", "run_id", "method", "suite", "seed", "step", "task", "epoch", "success")
DRIFT_FIELDS = ("format_version", "run_id", "method", "suite", "seed", "step", "modality", "drift")
METRIC_FIELDS = ("format_version", "run_id", "method", "suite", "seed", "fwt", "nbt", "auc")


class DataError(RuntimeError):
    """Missing, mismatched or corrupt files."""


class RunLocked(RuntimeError):
    pass


# ---------------------------------------------------------------- data


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / DATA_DIR


def task_file(root: Path, task_id: int) -> Path:
    return root / f"task_{task_id:03d}.jsonl"


def generate_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Suite description plus one demonstration file per task; skipped when already present."""
    root = data_dir(cfg)
    if not force and _data_current(root, cfg):
        log.info("data in %s already matches the config; skipping", root)
        return root
    root.mkdir(parents=True, exist_ok=True)
    s = cfg.suite
    suite = make_suite(s.kind, s.num_tasks, s.seed, s.horizon)
    # Collect everything first so an unsolvable task leaves no partial dataset behind.
    demos = {t.task_id: collect_demos(t, s.demos_per_task, derive_seed(s.seed, 100, t.task_id))
             for t in suite.tasks}
    write_suite(root / "suite.json", suite)
    for tid, trajs in demos.items():
        write_trajectories(task_file(root, tid), trajs)
    manifest = {"format_version": RUN_FORMAT_VERSION, "artifact_version": __version__,
                "data_hash": cfg.data_hash(), "suite": s.model_dump(),
                "files": ["suite.json"] + [task_file(root, tid).name for tid in demos]}
    _write_json(root / DATA_MANIFEST, manifest)
    return root


def _data_current(root: Path, cfg: ExperimentConfig) -> bool:
    try:
        m = json.loads((root / DATA_MANIFEST).read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        return False
    return (m.get("format_version") == RUN_FORMAT_VERSION and m.get("data_hash") == cfg.data_hash()
            and all((root / f).exists() for f in m.get("files", [])))


def load_data(root: Path, expected_hash: str | None = None) -> tuple[TaskSuite, dict[int, list[Trajectory]]]:
    root = Path(root)
    try:
        m = json.loads((root / DATA_MANIFEST).read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset at {root}; run gen-data first") from None
    except json.JSONDecodeError:
        raise DataError(f"{root / DATA_MANIFEST}: corrupt data manifest") from None
    if m.get("format_version") != RUN_FORMAT_VERSION:
        raise DataError(f"{root / DATA_MANIFEST}: unsupported format version {m.get('format_version')!r}")
    if expected_hash is not None and m.get("data_hash") != expected_hash:
        raise DataError(f"dataset at {root} was generated from a different suite config; rerun gen-data")
    try:
        suite = read_suite(root / "suite.json")
        demos = {t.task_id: read_trajectories(task_file(root, t.task_id)) for t in suite.tasks}
    except FileNotFoundError as exc:
        raise DataError(f"missing data file {exc.filename}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None
    return suite, demos


# ---------------------------------------------------------------- runs


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / cfg.train.method / f"seed_{seed}"


@contextmanager
def run_lock(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{path} is locked by another process (remove {lock} if it is stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def read_manifest(path: Path) -> dict:
    f = Path(path) / MANIFEST
    try:
        m = json.loads(f.read_text())
    except FileNotFoundError:
        raise DataError(f"no run manifest in {path}") from None
    except json.JSONDecodeError:
        raise DataError(f"{f}: corrupt manifest") from None
    if m.get("format_version") != RUN_FORMAT_VERSION:
        raise DataError(f"{f}: unsupported format version {m.get('format_version')!r}")
    return m


def is_complete(path: Path, cfg: ExperimentConfig) -> bool:
    try:
        m = read_manifest(path)
    except DataError:
        return False
    files = list(m.get("checkpoints", {}).values()) + list(m.get("files", {}).values())
    return (m.get("status") == "complete" and m.get("config_hash") == cfg.run_hash()
            and all((path / f).exists() for f in files))


def train_seed(cfg: ExperimentConfig, seed: int, force: bool = False) -> Path | None:
    """Run one seed; returns the run directory, or None when an up-to-date run is kept."""
    out = run_dir(cfg, seed)
    if not force and is_complete(out, cfg):
        log.info("%s already complete; skipping (use --force to rerun)", out)
        return None
    suite, demos = load_data(data_dir(cfg), cfg.data_hash())
    with run_lock(out):
        _clear_run(out)
        (out / "config.yaml").write_text(dump_config(cfg))
        t0 = time.perf_counter()
        with open(out / "train_log.jsonl", "w") as logf:
            def on_epoch(rec):
                logf.write(json.dumps({"format_version": RUN_FORMAT_VERSION, **rec}) + "\n")
                logf.flush()
            probe = demos[suite.tasks[0].task_id]
            report = run_lifelong(suite, demos, cfg.policy.build(), cfg.train.build(seed), run_dir=out,
                                  probe=probe, on_epoch=on_epoch)
        run_id = f"{cfg.train.method}-seed{seed}"
        meta = dict(run_id=run_id, method=cfg.train.method, suite=cfg.suite.kind, seed=seed)
        write_success(out / "success.csv", report.success, **meta)
        write_drift(out / "drift.csv", report.drift, **meta)
        write_metrics(out / "metrics.csv", [dict(meta, fwt=report.metrics.fwt, nbt=report.metrics.nbt,
                                                 auc=report.metrics.auc)])
        manifest = {
            "format_version": RUN_FORMAT_VERSION, "artifact_version": __version__, "status": "complete",
            "config_hash": cfg.run_hash(), "data_hash": cfg.data_hash(), "run_id": run_id,
            "method": cfg.train.method, "seed": seed, "suite": cfg.suite.kind,
            "num_tasks": len(suite), "eval_epochs": list(cfg.train.eval_epochs),
            "data_dir": os.path.relpath(data_dir(cfg), out),
            "checkpoints": {f"step{k}_epoch{e}": os.path.relpath(p, out)
                            for (k, e), p in sorted(report.checkpoints.items())},
            "files": {"success": "success.csv", "drift": "drift.csv", "metrics": "metrics.csv",
                      "train_log": "train_log.jsonl", "config": "config.yaml"},
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "train_wall_time_s": round(report.wall_time, 3),
        }
        _write_json(out / MANIFEST, manifest)
    return out


def _clear_run(out: Path) -> None:
    for name in (MANIFEST, "success.csv", "drift.csv", "metrics.csv", "train_log.jsonl", "config.yaml"):
        (out / name).unlink(missing_ok=True)
    ck = out / "checkpoints"
    if ck.is_dir():
        for f in ck.glob("step*_epoch*.npz"):
            f.unlink()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- tables


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) if f != "format_version" else RUN_FORMAT_VERSION for f in fields])
    Path(path).write_text(buf.getvalue())


def _read_csv(path: Path, fields: Sequence[str]) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"missing table {path}") from None
    for i, r in enumerate(rows, 2):
        if set(r) != set(fields):
            raise DataError(f"{path}: unexpected columns {sorted(r)}")
        if r["format_version"] != str(RUN_FORMAT_VERSION):
            raise DataError(f"{path}:{i}: unsupported format version {r['format_version']!r}")
    return rows


def write_success(path: Path, c: SuccessTensor, **meta) -> None:
    _write_csv(path, SUCCESS_FIELDS, (dict(meta, step=i, task=j, epoch=e, success=r) for i, j, e, r in c.rows()))


def read_success(path: Path, num_tasks: int, eval_epochs: Sequence[int]) -> SuccessTensor:
    rows = _read_csv(path, SUCCESS_FIELDS)
    try:
        return SuccessTensor.from_rows(num_tasks, eval_epochs,
                                       ((r["step"], r["task"], r["epoch"], r["success"]) for r in rows))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def write_drift(path: Path, drift: Sequence[DriftRecord], **meta) -> None:
    _write_csv(path, DRIFT_FIELDS, (dict(meta, step=d.step, modality=m, drift=v)
                                    for d in drift for m, v in d.as_dict().items()))


def read_drift(path: Path) -> list[DriftRecord]:
    by_step: dict[int, dict[str, float]] = {}
    for r in _read_csv(path, DRIFT_FIELDS):
        by_step.setdefault(int(r["step"]), {})[r["modality"]] = float(r["drift"])
    return [DriftRecord(k, **v) for k, v in sorted(by_step.items())]


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    _write_csv(path, METRIC_FIELDS, rows)


# ---------------------------------------------------------------- evaluation


@dataclass
class SeedResult:
    path: Path
    manifest: dict
    success: SuccessTensor
    drift: list[DriftRecord]

    @property
    def metrics(self):
        return compute_metrics(self.success)


def find_runs(path) -> list[Path]:
    path = Path(path)
    if (path / MANIFEST).exists():
        return [path]
    found = sorted((p.parent for p in path.glob(f"seed_*/{MANIFEST}")),
                   key=lambda p: int(p.name.split("_")[1]) if p.name.split("_")[1].isdigit() else 1 << 60)
    if not found:
        raise DataError(f"no completed runs under {path}")
    return found


def load_seed(path: Path) -> SeedResult:
    m = read_manifest(path)
    if m.get("status") != "complete":
        raise DataError(f"{path}: run is not complete")
    c = read_success(path / m["files"]["success"], m["num_tasks"], m["eval_epochs"])
    return SeedResult(path, m, c, read_drift(path / m["files"]["drift"]))


def recompute_seed(path: Path, workers: int = 1) -> SeedResult:
    """Rebuild the success tensor and drift records from the saved checkpoints."""
    m = read_manifest(path)
    cfg = load_config(path / m["files"]["config"])
    suite, demos = load_data((path / m["data_dir"]).resolve(), m["data_hash"])
    E = m["eval_epochs"]
    c = SuccessTensor(m["num_tasks"], E)
    finals = {}
    for key, rel in m["checkpoints"].items():
        k, e = (int(x) for x in key.replace("step", "").split("_epoch"))
        try:
            policy, _ = load_checkpoint(path / rel, frozen=True)
        except FileNotFoundError:
            raise DataError(f"missing checkpoint {path / rel}") from None
        except ValueError as exc:
            raise DataError(str(exc)) from None
        for j in range(1, k + 1):
            c[(k, j, e)] = rollout_success(policy, suite.tasks[j - 1], cfg.train.eval_episodes, m["seed"],
                                           workers=workers)
        if e == max(E):
            finals[k] = policy
    probe = demos[suite.tasks[0].task_id]
    drift = []
    for k in range(2, m["num_tasks"] + 1):
        drift.append(latent_drift(finals[k], finals[k - 1], probe, step=k))
    return SeedResult(path, m, c, drift)


def metrics_rows(results: Sequence[SeedResult]) -> list[dict]:
    rows = []
    for r in results:
        fwt, nbt, auc = r.metrics
        rows.append({"run_id": r.manifest["run_id"], "method": r.manifest["method"], "suite": r.manifest["suite"],
                     "seed": r.manifest["seed"], "fwt": fwt, "nbt": nbt, "auc": auc})
    return rows


def summary_row(rows: Sequence[dict]) -> dict:
    """mean and standard error across seeds, formatted as 'mean±se'."""
    out = {"run_id": "mean±se", "method": ",".join(sorted({r["method"] for r in rows})),
           "suite": ",".join(sorted({r["suite"] for r in rows})), "seed": "all"}
    for k in ("fwt", "nbt", "auc"):
        mu, se = mean_and_stderr([r[k] for r in rows])
        out[k] = f"{mu:.4f}±{se:.4f}"
    return out


def write_eval_table(path: Path, rows: Sequence[dict]) -> None:
    table = list(rows) + [summary_row(rows)]
    _write_csv(path, METRIC_FIELDS, table)


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'run':<24} {'FWT':>16} {'NBT':>16} {'AUC':>16}"]
    for r in list(rows) + [summary_row(rows)]:
        vals = [r[k] if isinstance(r[k], str) else f"{r[k]:.4f}" for k in ("fwt", "nbt", "auc")]
        lines.append(f"{r['run_id']:<24} {vals[0]:>16} {vals[1]:>16} {vals[2]:>16}")
    return "\n".join(lines)


# ---------------------------------------------------------------- reports


def build_report(results: Sequence[SeedResult], out: Path) -> dict[str, Path]:
    """Long-format series for external plotting plus a per-method comparison table."""
    if not results:
        raise DataError("nothing to report")
    ref = results[0].manifest
    for r in results[1:]:
        m = r.manifest
        if (m["data_hash"], m["num_tasks"], m["suite"]) != (ref["data_hash"], ref["num_tasks"], ref["suite"]):
            raise DataError(f"{r.path} uses a different suite than {results[0].path}; refusing to compare")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_method: dict[str, list[SeedResult]] = {}
    for r in results:
        by_method.setdefault(r.manifest["method"], []).append(r)

    comparison = []
    for method, rs in by_method.items():
        rows = metrics_rows(rs)
        row = {"method": method, "suite": ref["suite"], "seeds": len(rs)}
        for k in ("fwt", "nbt", "auc"):
            row[f"{k}_mean"], row[f"{k}_se"] = mean_and_stderr([x[k] for x in rows])
        comparison.append(row)
    cmp_fields = ("format_version", "method", "suite", "seeds", "fwt_mean", "fwt_se", "nbt_mean", "nbt_se",
                  "auc_mean", "auc_se")
    paths = {"comparison": out / "comparison.csv", "success": out / "success_long.csv",
             "steps": out / "step_curves.csv", "drift": out / "drift_long.csv"}
    _write_csv(paths["comparison"], cmp_fields, comparison)

    succ, steps, drift = [], [], []
    for r in results:
        m = r.manifest
        meta = {"run_id": m["run_id"], "method": m["method"], "suite": m["suite"], "seed": m["seed"]}
        for i, j, e, v in r.success.rows():
            succ.append(dict(meta, step=i, task=j, epoch=e, success=v))
        last = r.success.e_last
        for i in range(1, r.success.K + 1):
            seen = [r.success[(i, j, last)] for j in range(1, i + 1)]
            steps.append(dict(meta, step=i, mean_success=sum(seen) / len(seen)))
        for d in r.drift:
            for mod in MODALITIES:
                drift.append(dict(meta, step=d.step, modality=mod, drift=getattr(d, mod)))
    _write_csv(paths["success"], SUCCESS_FIELDS, succ)
    _write_csv(paths["steps"], ("format_version", "run_id", "method", "suite", "seed", "step", "mean_success"), steps)
    _write_csv(paths["drift"], DRIFT_FIELDS, drift)
    return paths
