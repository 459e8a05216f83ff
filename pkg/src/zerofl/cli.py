"""Experiment runner: wires config, data, model and the round loop, and
writes all metric/analysis artifacts to the output directory.

Outputs of `zerofl run`:
    metrics.csv          per-round metrics (schema below)
    overlap.csv          (round, layer, nonzero_ratio) for sparsifiable layers
    heatmap.txt          0/1 mask-position matrix, one column per snapshot
    jaccard.csv          pairwise Jaccard similarity of the snapshots
    flops.csv            theoretical per-layer MAC accounting
    final_model.zfu      the final global model as a FullDense ZFU update
    resolved_config.ini  the fully resolved configuration actually used

metrics.csv columns: round, lr, train_loss, test_acc, bytes_up, bytes_dense,
savings, then one nnz_<tensor> column per sparsifiable weight tensor.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    flops_report,
    write_flops_csv,
    write_heatmap,
    write_jaccard_csv,
    write_overlap_csv,
)
from .codec import Strategy, build_update, serialize_update
from .config import ExperimentConfig, config_to_ini, parse_config, validate_config
from .data import Dataset, load_idx, lda_partition, make_blob_task
from .federation import STREAM_MODEL_INIT, run_experiment
from .model import init_cnn, init_mlp

log = logging.getLogger("zerofl")


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data.kind == "blobs":
        train, test = make_blob_task(
            cfg.data.classes,
            cfg.data.samples_per_class,
            cfg.data.test_samples_per_class,
            cfg.data.dims,
            cfg.data.spread,
            cfg.seed,
        )
    else:
        train = load_idx(cfg.data.train_images, cfg.data.train_labels)
        test = load_idx(cfg.data.test_images, cfg.data.test_labels)
    if cfg.model.arch == "mlp":
        train = Dataset(train.samples.reshape(len(train), -1), train.labels)
        test = Dataset(test.samples.reshape(len(test), -1), test.labels)
    return train, test


def build_model(cfg: ExperimentConfig, train: Dataset):
    rng = np.random.default_rng([cfg.seed, STREAM_MODEL_INIT])
    num_classes = max(train.num_classes, 2)
    if cfg.model.arch == "mlp":
        input_dim = int(np.prod(train.samples.shape[1:]))
        return init_mlp(input_dim, num_classes, hidden=(cfg.model.hidden, cfg.model.hidden), rng=rng)
    _, c, h, w = train.samples.shape
    return init_cnn(c, (h, w), num_classes, hidden=cfg.model.hidden, rng=rng)


def run(cfg: ExperimentConfig, workers: int = 1) -> int:
    """Execute one experiment and write every artifact; returns exit status."""
    if not cfg.out_dir:
        raise ValueError("no output directory: set experiment.out_dir or pass --out")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    plan = lda_partition(train, cfg.total_clients, cfg.data.alpha, cfg.seed)
    params0 = build_model(cfg, train)
    fed = cfg.federation()
    log.info(
        "run: %d clients / %d per round, %d rounds, strategy=%s sp=%s r_mask=%s",
        fed.total_clients, fed.clients_per_round, fed.total_rounds,
        fed.strategy.name, fed.sp, fed.r_mask,
    )
    result = run_experiment(
        fed, params0, train, test, plan, workers=workers, snapshot_every=cfg.snapshot_every
    )
    for rec in result.records:
        log.info(
            "round %d: lr=%.5f loss=%.4f acc=%.4f savings=%.2fx",
            rec.round, rec.lr, rec.train_loss, rec.test_accuracy, rec.savings,
        )
    _write_metrics(out / "metrics.csv", result)
    write_overlap_csv(
        out / "overlap.csv",
        [(r.round, k, v) for r in result.records for k, v in r.nonzero_ratios.items()],
    )
    write_heatmap(out / "heatmap.txt", result.snapshots)
    write_jaccard_csv(out / "jaccard.csv", result.snapshots)
    sample_shape = tuple(train.samples.shape[1:])
    write_flops_csv(out / "flops.csv", flops_report(result.params, cfg.sp, sample_shape))
    final = build_update(result.params, result.params, Strategy.FULL_DENSE, cfg.sp, cfg.r_mask)
    (out / "final_model.zfu").write_bytes(serialize_update(final))
    (out / "resolved_config.ini").write_text(config_to_ini(cfg))
    return 0


def metrics_header(nonzero_keys: list[str]) -> list[str]:
    return [
        "round", "lr", "train_loss", "test_acc",
        "bytes_up", "bytes_dense", "savings",
    ] + [f"nnz_{k}" for k in nonzero_keys]


def _write_metrics(path, result) -> None:
    keys = list(result.records[0].nonzero_ratios) if result.records else []
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(metrics_header(keys))
        for r in result.records:
            w.writerow(
                [r.round, repr(r.lr), repr(r.train_loss), repr(r.test_accuracy),
                 r.bytes_up, r.bytes_dense, repr(r.savings)]
                + [repr(r.nonzero_ratios[k]) for k in keys]
            )


@dataclass
class CompareResult:
    final_acc_a: float
    final_acc_b: float
    final_savings_a: float
    final_savings_b: float

    @property
    def acc_delta(self) -> float:
        return self.final_acc_b - self.final_acc_a

    @property
    def savings_delta(self) -> float:
        return self.final_savings_b - self.final_savings_a

    def table(self) -> str:
        rows = [
            ("", "run_a", "run_b", "delta (b-a)"),
            ("final_test_acc", f"{self.final_acc_a:.4f}", f"{self.final_acc_b:.4f}",
             f"{self.acc_delta:+.4f}"),
            ("final_savings", f"{self.final_savings_a:.3f}x", f"{self.final_savings_b:.3f}x",
             f"{self.savings_delta:+.3f}"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _final_metrics(run_dir) -> tuple[float, float]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    last = rows[-1]
    return float(last["test_acc"]), float(last["savings"])


def compare(run_a, run_b) -> CompareResult:
    """Final accuracy and savings of two finished runs, side by side."""
    acc_a, sav_a = _final_metrics(run_a)
    acc_b, sav_b = _final_metrics(run_b)
    return CompareResult(acc_a, acc_b, sav_a, sav_b)


def _setup_logging() -> None:
    level_name = os.environ.get("ZEROFL_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="zerofl",
        description="Deterministic federated-learning simulator with sparse "
                    "on-device training and sparsified uplink.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True, help="experiment INI file")
    p_run.add_argument("--out", help="output directory (overrides experiment.out_dir)")
    p_run.add_argument("--seed", type=int, help="override experiment.seed")
    p_run.add_argument("--workers", type=int, default=1, help="parallel client workers")
    p_run.add_argument("--snapshot-every", type=int, help="override output.snapshot_every")
    p_cmp = sub.add_parser("compare", help="summarize two finished runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            if args.out is not None:
                cfg.out_dir = args.out
            if args.seed is not None:
                cfg.seed = args.seed
            if args.snapshot_every is not None:
                cfg.snapshot_every = args.snapshot_every
            validate_config(cfg)
            return run(cfg, workers=args.workers)
        result = compare(args.run_a, args.run_b)
        print(result.table())
        return 0
    except Exception as exc:
        print(f"zerofl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
