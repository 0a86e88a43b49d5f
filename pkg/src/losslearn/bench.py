"""Benchmark grids, rank tables, loss-surface dumps.

Runs every (cell x loss x seed) training of a benchmark grid, writes raw
results plus mean/std and average-rank tables, and provides the loss and
noise-matrix inspection dumps. Within a cell, the dataset draw, the split,
the network initialization, and the batch order are shared across losses for
a given seed index, so losses are compared on identical footing.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import dataset_from_selector
from .datasets import split as split_dataset
from .network import TrainConfig, accuracy, arch_from_selector, init, train
from .noise import build_transition, noise_from_selector
from .reference import REFERENCE_KINDS, make_reference_loss
from .seeding import derive_seed
from .taylor import load_loss


class ConfigError(Exception):
    """Bad configuration or unresolvable selector; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Loss selectors
# ---------------------------------------------------------------------------

_PARAM_ALIASES = {
    "sce": {"A": "log_zero"},
    "bootstrap": {"mode": None},  # handled specially below
}


def loss_from_selector(text):
    """Resolve a loss selector.

    A known short name (optionally with :key=value parameters, e.g.
    "gce:q=0.5" or "bootstrap:weight=0.8:mode=hard") builds a reference loss;
    anything else is treated as a path to a saved polynomial loss file.
    """
    parts = text.split(":")
    kind = parts[0]
    if kind not in REFERENCE_KINDS:
        try:
            return load_loss(text)
        except FileNotFoundError:
            known = ", ".join(sorted(REFERENCE_KINDS))
            raise ConfigError(
                f"loss selector {text!r} is neither a known name ({known}) "
                "nor a readable loss file"
            ) from None
    params = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"bad loss option {part!r} in {text!r}")
        key = _PARAM_ALIASES.get(kind, {}).get(key, key)
        if kind == "bootstrap" and key is None:  # mode=soft|hard
            if value not in ("soft", "hard"):
                raise ConfigError(f"bootstrap mode must be soft or hard, not {value!r}")
            params["hard"] = value == "hard"
        elif value in ("true", "false"):
            params[key] = value == "true"
        else:
            try:
                params[key] = float(value)
            except ValueError:
                raise ConfigError(f"bad value {value!r} for {key!r} in {text!r}") from None
    try:
        return make_reference_loss(kind, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build loss {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Single training run (used by the train command and each benchmark job)
# ---------------------------------------------------------------------------


def run_single_training(
    loss,
    dataset_sel,
    arch_sel,
    noise_sel,
    *,
    epochs=5,
    batch_size=32,
    learning_rate=0.01,
    momentum=0.9,
    val_fraction=0.2,
    seed=0,
    pairing=None,
):
    """Train once from scratch; returns (clean val accuracy, diverged, curve)."""
    ds = dataset_from_selector(dataset_sel, seed=derive_seed(seed, "data"))
    noise_spec = noise_from_selector(noise_sel, ds.num_classes)
    sp = split_dataset(
        ds,
        val_fraction=val_fraction,
        noise=noise_spec,
        seed=derive_seed(seed, "split"),
        pairing=pairing,
    )
    shape = sp.train_features.shape[1:]
    input_shape = int(shape[0]) if len(shape) == 1 else (shape[0], shape[1], 1)
    spec = arch_from_selector(arch_sel, input_shape, ds.num_classes)
    net = init(spec, derive_seed(seed, "init"))
    cfg = TrainConfig(
        learning_rate=learning_rate,
        momentum=momentum,
        batch_size=batch_size,
        epochs=epochs,
        seed=derive_seed(seed, "train"),
    )
    result = train(net, loss, sp, cfg)
    if result.diverged:
        return 0.0, True, result.curve
    return accuracy(net, sp.val_features, sp.val_labels), False, result.curve


# ---------------------------------------------------------------------------
# Benchmark grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkGrid:
    cells: tuple  # of (arch, dataset, noise) triples
    losses: tuple  # of loss selectors
    seeds: int = 3
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    val_fraction: float = 0.2
    master_seed: int = 0
    workers: int = 1
    pairing: tuple = None

    def __post_init__(self):
        object.__setattr__(
            self, "cells", tuple(tuple(cell) for cell in self.cells)
        )
        object.__setattr__(self, "losses", tuple(self.losses))
        if self.pairing is not None:
            object.__setattr__(self, "pairing", tuple(self.pairing))
        if not self.cells:
            raise ConfigError("benchmark needs at least one cell")
        if not self.losses:
            raise ConfigError("benchmark needs at least one loss")
        for cell in self.cells:
            if len(cell) != 3:
                raise ConfigError(
                    f"cell {cell!r} must be [arch, dataset, noise]"
                )
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("grid config must be a JSON object")
        for name in ("cells", "losses"):
            if name not in doc:
                raise ConfigError(f"missing field '{name}'")
        known = {
            "cells", "losses", "seeds", "epochs", "batch_size",
            "learning_rate", "momentum", "val_fraction", "master_seed",
            "workers", "pairing",
        }
        for name in doc:
            if name not in known:
                raise ConfigError(f"unknown field '{name}'")
        cells = [
            (c["arch"], c["dataset"], c["noise"]) if isinstance(c, dict) else c
            for c in doc["cells"]
        ]
        kwargs = {k: v for k, v in doc.items() if k != "cells"}
        try:
            return cls(cells=cells, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RankTable:
    losses: tuple
    rows: list = field(default_factory=list)  # (arch, ds, noise, loss, mean, std, rank)
    averages: dict = field(default_factory=dict)  # loss -> average rank


def mid_ranks(values):
    """Ranks 1..k by descending value; tied values share the mean rank."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(-values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(sorted_vals) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        shared = (i + 1 + j) / 2.0  # mean of integer ranks i+1 .. j
        ranks[order[i:j]] = shared
        i = j
    return ranks


def compute_ranks(grid, results):
    """Build the RankTable from raw result rows.

    results rows are (arch, dataset, noise, loss, seed, accuracy, diverged),
    exactly as written to results.csv.
    """
    table = RankTable(losses=grid.losses)
    rank_sums = {loss: 0.0 for loss in grid.losses}
    for cell in grid.cells:
        arch, dsel, nsel = cell
        means = []
        stds = []
        for loss in grid.losses:
            accs = [
                row[5]
                for row in results
                if row[:4] == (arch, dsel, nsel, loss)
            ]
            if len(accs) != grid.seeds:
                raise RuntimeError(f"cell {cell} x {loss}: {len(accs)} rows")
            means.append(float(np.mean(accs)))
            stds.append(float(np.std(accs)))
        ranks = mid_ranks(means)
        for loss, mean, std, rank in zip(grid.losses, means, stds, ranks):
            table.rows.append((arch, dsel, nsel, loss, mean, std, float(rank)))
            rank_sums[loss] += float(rank)
    table.averages = {
        loss: rank_sums[loss] / len(grid.cells) for loss in grid.losses
    }
    return table


def run_benchmark(grid, out_dir):
    """Run the whole grid; writes results.csv, rank_table.csv, avg_ranks.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # resolve everything up front so selector typos fail before any training
    losses = {}
    for sel in grid.losses:
        losses[sel] = loss_from_selector(sel)
    try:
        for arch, dsel, nsel in grid.cells:
            ds = dataset_from_selector(dsel, seed=0)
            noise_from_selector(nsel, ds.num_classes)
            shape = ds.features.shape[1:]
            input_shape = (
                int(shape[0]) if len(shape) == 1 else (shape[0], shape[1], 1)
            )
            arch_from_selector(arch, input_shape, ds.num_classes)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"unresolvable cell selector: {exc}") from None

    jobs = [
        (arch, dsel, nsel, loss_sel, s)
        for (arch, dsel, nsel) in grid.cells
        for loss_sel in grid.losses
        for s in range(grid.seeds)
    ]

    def execute(job):
        arch, dsel, nsel, loss_sel, s = job
        # the seed path excludes the loss: every loss sees the same data,
        # split, init, and batch order for a given seed index
        seed = derive_seed(grid.master_seed, "cell", arch, dsel, nsel, s)
        acc, diverged, _ = run_single_training(
            losses[loss_sel],
            dsel,
            arch,
            nsel,
            epochs=grid.epochs,
            batch_size=grid.batch_size,
            learning_rate=grid.learning_rate,
            momentum=grid.momentum,
            val_fraction=grid.val_fraction,
            seed=seed,
            pairing=grid.pairing,
        )
        return (arch, dsel, nsel, loss_sel, s, acc, diverged)

    if grid.workers == 1:
        results = [execute(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=grid.workers) as pool:
            results = list(pool.map(execute, jobs))

    (out_dir / "results.csv").write_text(results_csv(results))
    table = compute_ranks(grid, results)
    (out_dir / "rank_table.csv").write_text(rank_table_csv(table))
    (out_dir / "avg_ranks.csv").write_text(avg_ranks_csv(table))
    return table


def results_csv(results):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arch", "dataset", "noise", "loss", "seed", "accuracy", "diverged"])
    for arch, dsel, nsel, loss_sel, s, acc, diverged in results:
        writer.writerow([arch, dsel, nsel, loss_sel, s, f"{acc:.6f}", int(diverged)])
    return buf.getvalue()


def rank_table_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["arch", "dataset", "noise", "loss", "mean_accuracy", "std_accuracy", "rank"]
    )
    for arch, dsel, nsel, loss, mean, std, rank in table.rows:
        writer.writerow(
            [arch, dsel, nsel, loss, f"{mean:.6f}", f"{std:.6f}", f"{rank:.1f}"]
        )
    return buf.getvalue()


def avg_ranks_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["loss", "average_rank"])
    for loss in table.losses:
        writer.writerow([loss, f"{table.averages[loss]:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Inspection dumps
# ---------------------------------------------------------------------------


def inspect_loss_csv(loss, resolution=100):
    """Binary per-example loss surface: yhat is P(class 0), y marks class 0.

    Emits resolution+1 evenly spaced yhat values over [0, 1], each against
    both labels.
    """
    if resolution < 1:
        raise ConfigError("resolution must be at least 1")
    lines = ["yhat,y,loss"]
    labels = {0: np.array([0.0, 1.0]), 1: np.array([1.0, 0.0])}
    for step in range(resolution + 1):
        p = step / resolution
        pred = np.array([p, 1.0 - p])
        for y in (0, 1):
            value = float(loss.batch_value(pred[None, :], labels[y][None, :])[0])
            lines.append(f"{p:.6f},{y},{value + 0.0:.6f}")  # +0.0 drops the sign of -0.0
    return "\n".join(lines) + "\n"


def noise_matrix_csv(noise_sel, num_classes, pairing=None):
    spec = noise_from_selector(noise_sel, num_classes)
    if spec is None:
        t = np.eye(num_classes)
    else:
        t = build_transition(spec, pairing=pairing)
    lines = []
    for row in t:
        lines.append(",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
