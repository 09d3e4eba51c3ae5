"""Adam optimization, learning-rate schedules, splits, and the pre-training loop.

The schedule ramps linearly from 0 to the peak learning rate over the warmup
epochs (interpolated per step), then follows the configured decay: constant,
linear to zero, or half-cosine to zero.  Splits use a seeded shuffle with
floor rounding; the remainder goes to the test partition, so 100 molecules
under (0.92, 0.04, 0.04) split exactly into sizes (92, 4, 4).

Per-epoch records are line-delimited JSON with no timestamps, so two runs
with the same seed produce byte-identical logs; wall-clock times go to a
separate timing file.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tape
from .backbones import ModelState, batch_graphs, forward, save_model
from .encodings import AssembledFeatures
from .molgraph import MolecularGraph
from .multitask import (
    LabelSet,
    LossWeights,
    TaskSpec,
    combined_loss,
    head_input,
    task_head_forward,
    task_loss,
)
from .seeding import rng_stream

SCHEDULES = ("constant", "linear-decay", "cosine")


class TooFewMolecules(ValueError):
    pass


class NaNLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    peak_lr: float = 3e-4
    warmup_epochs: int = 5
    schedule: str = "linear-decay"
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.92, 0.04, 0.04)
    seed: int = 0

    def validate(self) -> None:
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be three non-negative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")


def split_dataset(ids, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Seeded-shuffle partition into train/valid/test index lists.

    Sizes are floor(n * fraction) for train and valid; the remainder goes to
    test.  Partitions are disjoint, exhaustive, and deterministic per seed.
    """
    spec.validate()
    n = len(ids)
    if n < 3:
        raise TooFewMolecules(f"need at least 3 molecules to split, got {n}")
    order = rng_stream(spec.seed, "split").permutation(n)
    n_train = math.floor(n * spec.fractions[0])
    n_valid = math.floor(n * spec.fractions[1])
    train = sorted(int(i) for i in order[:n_train])
    valid = sorted(int(i) for i in order[n_train : n_train + n_valid])
    test = sorted(int(i) for i in order[n_train + n_valid :])
    return train, valid, test


def lr_at(fraction: float, config: TrainConfig) -> float:
    """Learning rate at a point of training, fraction in [0, 1]."""
    fraction = min(max(fraction, 0.0), 1.0)
    warm = config.warmup_epochs / config.epochs
    if fraction < warm:
        return config.peak_lr * fraction / warm
    if config.schedule == "constant" or warm >= 1.0:
        return config.peak_lr
    rest = (fraction - warm) / (1.0 - warm)
    if config.schedule == "linear-decay":
        return config.peak_lr * (1.0 - rest)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * rest))


class OptimizerState:
    """Adam first/second moment accumulators plus the shared step counter."""

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}


def adam_step(params: list[Parameter], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients currently in params."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1**t
    correct2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- pre-training ---------------------------------------------------------------


@dataclass
class PretrainDataset:
    """Featurized molecules plus task labels, aligned by molecule order.

    Graph-level label sets have one row per molecule; node-level label sets
    have one row per atom, concatenated in molecule order.
    """

    graphs: list[MolecularGraph]
    features: list[AssembledFeatures]
    graph_labels: dict[str, LabelSet] = field(default_factory=dict)
    node_labels: dict[str, LabelSet] = field(default_factory=dict)

    def __post_init__(self):
        counts = [g.num_atoms for g in self.graphs]
        self.node_offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)

    def __len__(self) -> int:
        return len(self.graphs)

    def node_rows(self, molecule_indices) -> np.ndarray:
        chunks = [
            np.arange(self.node_offsets[i], self.node_offsets[i + 1]) for i in molecule_indices
        ]
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)


def ensure_heads(model: ModelState, tasks: list[TaskSpec]) -> None:
    """Create any missing task heads with the level-appropriate input width."""
    cfg = model.config
    for spec in tasks:
        spec.validate()
        if spec.name in model.heads:
            continue
        if spec.level == "node":
            in_dim = cfg.d_node
        else:
            in_dim = cfg.d_global if cfg.graph_head_input == "global" else cfg.d_node
        model.add_task_head(spec.name, spec.level, in_dim, spec.head_output_width)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: dict[str, float]
    valid: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "lr": self.lr, "train": self.train, "valid": self.valid},
            sort_keys=True,
        )


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = math.inf

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(record.to_json() + "\n")
            fh.write(json.dumps({"best_epoch": self.best_epoch, "best_valid": self.best_valid}, sort_keys=True) + "\n")


def _losses_for_batch(
    tape: Tape,
    model: ModelState,
    dataset: PretrainDataset,
    tasks: list[TaskSpec],
    molecule_indices: np.ndarray,
    weights: LossWeights,
    training: bool,
    step: int,
    collect_predictions: dict[str, list] | None = None,
):
    graphs = [dataset.graphs[i] for i in molecule_indices]
    feats = [dataset.features[i] for i in molecule_indices]
    batch = batch_graphs(graphs, feats, dtype=model.config.np_dtype)
    result = forward(tape, batch, model, training=training, step=step)
    node_rows = dataset.node_rows(molecule_indices)

    group_terms: dict[str, list] = {}
    task_values: dict[str, float] = {}
    for spec in tasks:
        if spec.level == "graph":
            labels = dataset.graph_labels[spec.name].rows(np.asarray(molecule_indices))
        else:
            labels = dataset.node_labels[spec.name].rows(node_rows)
        if labels.present == 0:
            continue
        emb = head_input(tape, result, batch, model, spec)
        pred = task_head_forward(tape, model, spec.name, emb)
        loss = task_loss(tape, spec, pred, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NaNLossError(
                f"non-finite loss for task {spec.name!r} in group {spec.group!r} at step {step}"
            )
        task_values[spec.name] = value
        group_terms.setdefault(spec.group, []).append(loss)
        if collect_predictions is not None:
            collect_predictions.setdefault(spec.name, []).append((pred.data.copy(), labels))

    group_losses = {}
    for group, terms in group_terms.items():
        total = terms[0]
        for term in terms[1:]:
            total = tape.add(total, term)
        group_losses[group] = tape.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total
    total = combined_loss(tape, group_losses, weights)
    group_values = {g: float(t.data) for g, t in group_losses.items()}
    return total, group_values, task_values


def _epoch_summary(per_batch: list[tuple[dict[str, float], int]]) -> dict[str, float]:
    """Weighted mean of per-group losses over batches (weights = batch sizes)."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    total_sum = 0.0
    total_count = 0
    for values, size in per_batch:
        for group, value in values.items():
            if group == "total":
                total_sum += value * size
                total_count += size
                continue
            sums[group] = sums.get(group, 0.0) + value * size
            counts[group] = counts.get(group, 0) + size
    out = {g: sums[g] / counts[g] for g in sums}
    out["total"] = total_sum / total_count if total_count else 0.0
    return dict(sorted(out.items()))


def _masked_auroc(logits: np.ndarray, labels: np.ndarray) -> float:
    from .downstream import auroc  # local import: downstream depends on this module

    return auroc(logits, labels)


def evaluate(
    model: ModelState,
    dataset: PretrainDataset,
    tasks: list[TaskSpec],
    indices,
    weights: LossWeights,
    batch_size: int,
) -> dict[str, float]:
    """Per-group (and total) losses over a molecule index list, dropout off.

    Binary tasks additionally report a pooled AUROC over every masked-in
    label entry, under the key ``auroc_<task>`` (omitted when the evaluated
    labels are single-class).
    """
    per_batch = []
    predictions: dict[str, list] = {}
    indices = np.asarray(indices)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        tape = Tape(recording=False)
        total, group_values, _ = _losses_for_batch(
            tape, model, dataset, tasks, chunk, weights, training=False, step=0,
            collect_predictions=predictions,
        )
        group_values = dict(group_values)
        group_values["total"] = float(total.data)
        per_batch.append((group_values, len(chunk)))
    if not per_batch:
        return {"total": 0.0}
    summary = _epoch_summary(per_batch)
    for spec in tasks:
        if spec.kind != "binary" or spec.name not in predictions:
            continue
        logits = np.concatenate([p for p, _ in predictions[spec.name]], axis=0)
        values = np.concatenate([l.values for _, l in predictions[spec.name]], axis=0)
        mask = np.concatenate([l.mask for _, l in predictions[spec.name]], axis=0) > 0
        labels = values[mask]
        if labels.size == 0 or labels.min() == labels.max():
            continue
        summary[f"auroc_{spec.name}"] = _masked_auroc(logits[mask], labels)
    return dict(sorted(summary.items()))


def pretrain(
    dataset: PretrainDataset,
    model: ModelState,
    tasks: list[TaskSpec],
    config: TrainConfig,
    out_dir=None,
    split: SplitSpec | None = None,
    weights: LossWeights | None = None,
) -> TrainingLog:
    """Full pre-training loop with best-by-validation checkpointing.

    Per epoch: one pass over seeded-shuffled training batches optimizing the
    combined loss, then a validation pass.  The checkpoint with the lowest
    validation total and the final checkpoint are both saved when ``out_dir``
    is given.  An empty validation split falls back to the training loss for
    best-epoch selection.  A non-finite task loss aborts with the offending
    group named.
    """
    config.validate()
    weights = weights or LossWeights()
    split = split or SplitSpec(seed=config.seed)
    ensure_heads(model, tasks)

    train_idx, valid_idx, test_idx = split_dataset(list(range(len(dataset))), split)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "split.json", "w", encoding="utf-8") as fh:
            json.dump({"train": train_idx, "valid": valid_idx, "test": test_idx}, fh, sort_keys=True)
            fh.write("\n")

    optimizer = OptimizerState(model.parameters())
    batches_per_epoch = max(1, math.ceil(len(train_idx) / config.batch_size))
    total_steps = config.epochs * batches_per_epoch
    log = TrainingLog()
    timings: list[float] = []
    global_step = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng_stream(config.seed, "batch-order", epoch).permutation(len(train_idx))
        shuffled = np.asarray(train_idx)[order]
        per_batch = []
        epoch_lr = 0.0
        for start in range(0, len(shuffled), config.batch_size):
            chunk = shuffled[start : start + config.batch_size]
            lr = lr_at((global_step + 1) / total_steps, config)
            epoch_lr = lr
            model.zero_grad()
            tape = Tape()
            total, group_values, _ = _losses_for_batch(
                tape, model, dataset, tasks, chunk, weights, training=True, step=global_step
            )
            if total.requires_grad:
                tape.backward(total)
                adam_step(model.parameters(), optimizer, lr)
            group_values = dict(group_values)
            group_values["total"] = float(total.data)
            per_batch.append((group_values, len(chunk)))
            global_step += 1

        train_summary = _epoch_summary(per_batch)
        if valid_idx:
            valid_summary = evaluate(model, dataset, tasks, valid_idx, weights, config.batch_size)
        else:
            valid_summary = dict(train_summary)
        record = EpochRecord(epoch=epoch, lr=epoch_lr, train=train_summary, valid=valid_summary)
        log.records.append(record)
        timings.append(time.perf_counter() - started)

        if valid_summary["total"] < log.best_valid:
            log.best_valid = valid_summary["total"]
            log.best_epoch = epoch
            if out_path is not None:
                save_model(model, out_path / "best.ckpt")

    if out_path is not None:
        save_model(model, out_path / "final.ckpt")
        log.write_jsonl(out_path / "log.jsonl")
        with open(out_path / "timing.txt", "w", encoding="utf-8") as fh:
            for epoch, seconds in enumerate(timings, start=1):
                fh.write(f"epoch {epoch}: {seconds:.3f}s\n")
    return log
