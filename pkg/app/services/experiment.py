"""
Experiment orchestration behind the CLI: config loading, dataset
construction, run / partition / compare and the files each one writes.
"""

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.core import monitoring
from app.core.errors import ConfigError, InputError, ParseError
from app.models.checkpoint import save_model
from app.schemas.config import ExperimentConfig
from app.schemas.records import ROUNDS_CSV_HEADER, Curve, RoundRecord
from app.services.data import (
    Dataset,
    Partition,
    class_counts,
    label_entropy,
    load_csv,
    make_blobs,
    partition_dataset,
    save_partition_json,
    train_test_split,
)
from app.services.fed import RunResult, run
from app.services.metrics import NEVER, curve_from_records, party_stats, rounds_to_target, speedup

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COMPARISON_CSV_HEADER = ["algorithm", "final_accuracy", "rounds_to_target", "speedup"]
NEVER_MARKER = "<1×"


def load_experiment_config(path: PathLike, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a flat YAML document, apply CLI overrides and validate it."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}", cause=exc) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping of keys to values")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid config {path}: {problems}", cause=exc) from exc


def dump_config(cfg: ExperimentConfig, path: PathLike) -> None:
    """Echo the resolved config; loading the echo reproduces the run."""
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False), encoding="utf-8")


def build_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    if cfg.dataset == "blobs":
        full = make_blobs(
            cfg.blobs_num_classes, cfg.blobs_samples_per_class, cfg.blobs_dim, cfg.blobs_spread, cfg.blobs_seed
        )
        return train_test_split(full, cfg.test_fraction, cfg.blobs_seed)
    train, test = load_csv(cfg.train_csv), load_csv(cfg.test_csv)
    if train.dim != test.dim:
        raise InputError(f"train has {train.dim} features but test has {test.dim}")
    num_classes = max(train.num_classes, test.num_classes)
    return (
        Dataset(train.features, train.labels, num_classes),
        Dataset(test.features, test.labels, num_classes),
    )


@dataclass
class PartitionReport:
    partition: Partition
    counts: np.ndarray
    size_mean: float
    size_std: float
    mean_entropy: float


def _describe_partition(train: Dataset, partition: Partition) -> PartitionReport:
    counts = class_counts(train, partition)
    size_mean, size_std = party_stats(partition.sizes())
    mean_entropy = float(np.mean([label_entropy(row) for row in counts]))
    logger.info(
        f"Partitioned {train.n} samples across {partition.num_parties} parties: "
        f"size mean={size_mean:.1f} std={size_std:.1f}, label entropy mean={mean_entropy:.3f}"
    )
    return PartitionReport(partition, counts, size_mean, size_std, mean_entropy)


def write_class_counts(counts: np.ndarray, path: PathLike) -> None:
    num_classes = counts.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["party"] + [f"class_{k}" for k in range(num_classes)] + ["total"])
        for party, row in enumerate(counts):
            writer.writerow([party] + [int(v) for v in row] + [int(row.sum())])


def partition_experiment(cfg: ExperimentConfig) -> PartitionReport:
    """Partition the training set and write partition.json and class_counts.csv."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(cfg)
    report = _describe_partition(train, partition_dataset(train, cfg.partition_spec()))
    save_partition_json(report.partition, out / "partition.json")
    write_class_counts(report.counts, out / "class_counts.csv")
    return report


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    write_metrics: bool = True,
    checkpoint: bool = False,
    resume_from: Optional[PathLike] = None,
) -> RunResult:
    """Execute one federated run and write its outputs to cfg.output_dir."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    train, test = build_datasets(cfg)
    report = _describe_partition(train, partition_dataset(train, cfg.partition_spec()))
    save_partition_json(report.partition, out / "partition.json")

    algorithm = cfg.algorithm_config()
    arch = cfg.network_arch(train.dim, train.num_classes)
    logger.info(
        f"Starting {algorithm.label}: {algorithm.rounds} rounds, {cfg.num_parties} parties, "
        f"{arch.parameter_count()} parameters, {workers} worker(s)"
    )

    with open(out / "rounds.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROUNDS_CSV_HEADER)

        def stream(record: RoundRecord) -> None:
            writer.writerow(record.csv_row())
            f.flush()

        result = run(
            algorithm, report.partition, train, test, arch,
            workers=workers, eval_every=cfg.eval_every, on_round=stream,
            checkpoint_path=out / "federation.ckpt" if checkpoint else None,
            resume_from=resume_from,
        )

    save_model(out / "model.ckpt", result.final_model)
    if result.party_models:
        for pid, model in result.party_models.items():
            save_model(out / f"party_{pid}.ckpt", model)

    if not result.records:
        raise InputError(f"{resume_from} already covers all {algorithm.rounds} rounds")
    final = result.records[-1]
    summary = {
        "algorithm": algorithm.label,
        "rounds": algorithm.rounds,
        "parameter_count": arch.parameter_count(),
        "final_accuracy": final.accuracy,
    }
    if final.accuracy_std is not None:
        summary["final_accuracy_std"] = final.accuracy_std
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    if write_metrics:
        monitoring.write_metrics_snapshot(out / "metrics.prom")
    logger.info(f"Finished {algorithm.label}: final accuracy {final.accuracy:.4f}; outputs in {out}")
    return result


# --- comparison -------------------------------------------------------------

def read_rounds_csv(path: PathLike) -> Dict[str, Curve]:
    """Curves keyed by algorithm label, in order of first appearance."""
    records: "OrderedDict[str, List[RoundRecord]]" = OrderedDict()
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ROUNDS_CSV_HEADER:
                raise ParseError(f"{path}: expected header {','.join(ROUNDS_CSV_HEADER)}", 1)
            for line_number, row in enumerate(reader, start=2):
                try:
                    record = RoundRecord(
                        round=int(row["round"]),
                        algorithm=row["algorithm"],
                        participants=[int(p) for p in row["participants"].split(";") if p],
                        accuracy=float(row["accuracy"]),
                        mean_sup_loss=float(row["mean_sup_loss"]),
                        mean_con_loss=float(row["mean_con_loss"]) if row["mean_con_loss"] else None,
                    )
                except (ValueError, TypeError) as exc:
                    raise ParseError(f"{path}: malformed row: {exc}", line_number, exc) from exc
                records.setdefault(record.algorithm, []).append(record)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", cause=exc) from exc
    try:
        return OrderedDict((name, curve_from_records(recs, name)) for name, recs in records.items())
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}", cause=exc) from exc


@dataclass
class ComparisonRow:
    algorithm: str
    final_accuracy: float
    rounds_to_target: Optional[int]
    speedup: Union[float, str]

    def cells(self) -> List[str]:
        return [
            self.algorithm,
            f"{self.final_accuracy:.4f}",
            NEVER if self.rounds_to_target is None else str(self.rounds_to_target),
            NEVER_MARKER if self.speedup == NEVER else f"{self.speedup:.1f}×",
        ]


def compare_curves(curves: Dict[str, Curve], baseline: str) -> List[ComparisonRow]:
    if baseline not in curves:
        raise InputError(f"baseline {baseline!r} not found; available: {', '.join(curves) or 'none'}")
    base = curves[baseline]
    rows = []
    for name, curve in curves.items():
        rows.append(ComparisonRow(
            algorithm=name,
            final_accuracy=curve.final_accuracy,
            rounds_to_target=rounds_to_target(curve, base.final_accuracy) if base.final_accuracy > 0 else curve.points[0][0],
            speedup=speedup(base, curve),
        ))
    return rows


def compare_runs(
    paths: Sequence[PathLike],
    baseline: str = "fedavg",
    out_dir: Optional[PathLike] = None,
    console: Optional[Console] = None,
) -> List[ComparisonRow]:
    """Rounds-to-target and speedup of every run against the baseline's final accuracy."""
    curves: Dict[str, Curve] = OrderedDict()
    for path in paths:
        for name, curve in read_rounds_csv(path).items():
            if name in curves:
                raise InputError(f"algorithm {name!r} appears in more than one input")
            curves[name] = curve
    rows = compare_curves(curves, baseline)

    table = Table(title=f"Speedup against {baseline} (target {curves[baseline].final_accuracy:.4f})")
    for column in COMPARISON_CSV_HEADER:
        table.add_column(column, justify="left" if column == "algorithm" else "right")
    for row in rows:
        table.add_row(*row.cells())
    (console or Console()).print(table)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(COMPARISON_CSV_HEADER)
            for row in rows:
                writer.writerow(row.cells())
    return rows
