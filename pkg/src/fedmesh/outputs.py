"""CSV trace emitters and the run manifest.

Stable schemas, one header row each, floats written with ``repr`` so
identical runs produce byte-identical files:

* ``loss_curves.csv``: round, domain, loss - per-domain held-out loss of
  the global model (the loss-decline figure's data).
* ``param_trace.csv``: round, domain_eval_tag, index, value - tracked
  parameter coordinates; the ``global`` tag is the global model, domain
  tags are the mean of that domain's post-local-training models.
* ``metrics.csv`` / ``baseline_metrics.csv``: round, accuracy, precision,
  recall, f1 - pooled held-out metrics per round.
* ``clients.csv``: per round and client - participation, losses, and the
  noise receipt fields.
* ``manifest.json``: config hash, artifact version, timestamps, and a
  SHA-256 inventory of the emitted files; written atomically at run end.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

from .config import ConfigError, ExperimentConfig, config_hash
from .evaluation import MetricsReport, RoundReport

ARTIFACT_VERSION = "0.1.0"

LOSS_CURVES = "loss_curves.csv"
PARAM_TRACE = "param_trace.csv"
METRICS = "metrics.csv"
BASELINE_METRICS = "baseline_metrics.csv"
CLIENTS = "clients.csv"
MANIFEST = "manifest.json"


def _fmt(value: float) -> str:
    return repr(float(value))


def prepare_output_dir(path: str, force: bool = False) -> Path:
    """Create the output directory; refuse a non-empty one without force."""
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"output path {path!r} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError(
                f"output directory {path!r} is not empty; pass --force to overwrite"
            )
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_loss_curves(path: Path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "domain", "loss"])
        for report in reports:
            for domain, value in sorted(report.domain_losses.items()):
                writer.writerow([report.round_index, domain, _fmt(value)])


def write_param_trace(path: Path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "domain_eval_tag", "index", "value"])
        for report in reports:
            for tag, values in sorted(report.tracked.items()):
                for index, value in enumerate(values):
                    writer.writerow([report.round_index, tag, index, _fmt(value)])


def _write_metric_rows(path: Path, rows: list[tuple[int, MetricsReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "accuracy", "precision", "recall", "f1"])
        for round_index, report in rows:
            writer.writerow(
                [
                    round_index,
                    _fmt(report.accuracy),
                    _fmt(report.precision),
                    _fmt(report.recall),
                    _fmt(report.f1),
                ]
            )


def write_metrics(path: Path, reports: list[RoundReport]) -> None:
    _write_metric_rows(path, [(r.round_index, r.global_metrics) for r in reports])


def write_baseline_metrics(path: Path, rows: list[tuple[int, MetricsReport]]) -> None:
    _write_metric_rows(path, rows)


def write_clients(path: Path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "round",
                "client_id",
                "domain",
                "participated",
                "diverged",
                "sample_count",
                "loss_before",
                "loss_after",
                "epsilon",
                "delta",
                "mechanism",
                "sigma",
                "clip_applied",
                "pre_clip_norm",
            ]
        )
        for report in reports:
            for record in report.clients:
                receipt = record.receipt
                writer.writerow(
                    [
                        report.round_index,
                        record.client_id,
                        record.domain_tag,
                        int(record.participated),
                        int(record.diverged),
                        record.sample_count,
                        _fmt(record.loss_before),
                        _fmt(record.loss_after),
                        _fmt(record.epsilon) if record.epsilon is not None else "",
                        _fmt(record.delta) if record.delta is not None else "",
                        receipt.mechanism if receipt else "",
                        _fmt(receipt.sigma) if receipt else "",
                        int(receipt.clip_applied) if receipt else "",
                        _fmt(receipt.pre_clip_norm) if receipt else "",
                    ]
                )


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir: Path,
    config: ExperimentConfig,
    file_names: list[str],
    started_at: datetime,
) -> None:
    """Atomically write the run manifest (tmp file + rename)."""
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "config_hash": config_hash(config).hex(),
        "started_at": started_at.isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "files": [
            {
                "name": name,
                "bytes": (out_dir / name).stat().st_size,
                "sha256": _sha256_file(out_dir / name),
            }
            for name in sorted(file_names)
        ],
    }
    tmp = out_dir / (MANIFEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(tmp, out_dir / MANIFEST)


def write_run_artifacts(
    out_dir: Path,
    config: ExperimentConfig,
    reports: list[RoundReport],
    started_at: datetime,
) -> list[str]:
    """Emit every per-round CSV plus the manifest; returns the file names."""
    write_loss_curves(out_dir / LOSS_CURVES, reports)
    write_param_trace(out_dir / PARAM_TRACE, reports)
    write_metrics(out_dir / METRICS, reports)
    write_clients(out_dir / CLIENTS, reports)
    names = [LOSS_CURVES, PARAM_TRACE, METRICS, CLIENTS]
    write_manifest(out_dir, config, names, started_at)
    return names + [MANIFEST]
