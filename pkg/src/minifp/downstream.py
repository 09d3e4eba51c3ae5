"""Downstream task heads on fingerprints: training, sweeps, ensembling, metrics.

A head is a plain MLP over stored fingerprint vectors.  Hyperparameter
sweeps evaluate every grid point on one fixed seed and return the config
with the smallest validation loss (ties broken lexicographically on the
config tuple, so the argmin is enumeration-order independent).

The ensembling procedure: per repetition, re-partition the training ids
into num_folds folds, train one model per fold with best-epoch selection on
its held-out fold, average the fold models' outputs (post-sigmoid for
classification) for the ensemble prediction, and report mean and standard
deviation of validation/test scores across repetitions.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from .autodiff import BatchNormState, Parameter, Tape
from .fingerprints import FingerprintStore
from .multitask import LabelSet, bce_loss, hce_loss, mae_loss
from .seeding import derive_seed, rng_stream
from .trainer import OptimizerState, TrainConfig, adam_step, lr_at


class MissingFingerprint(KeyError):
    pass


class FoldTooSmall(ValueError):
    pass


class SingleClass(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


# -- configs --------------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 1024
    num_layers: int = 3
    dropout: float = 0.1
    normalization: str = "none"  # none | batch | layer
    skip_connection: bool = False
    learning_rate: float = 3e-4
    epochs: int = 25
    warmup_epochs: int = 0
    schedule: str = "constant"
    batch_size: int = 128

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.num_layers < 1 or self.epochs < 1:
            raise ValueError("hidden_dim, num_layers, and epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.normalization not in ("none", "batch", "layer"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.schedule not in ("constant", "linear-decay", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")

    def key(self) -> tuple:
        """Deterministic tie-break tuple for sweep argmin selection."""
        return (
            self.hidden_dim,
            self.num_layers,
            self.dropout,
            self.normalization,
            self.skip_connection,
            self.learning_rate,
            self.epochs,
            self.warmup_epochs,
            self.schedule,
            self.batch_size,
        )


@dataclass
class SweepSpace:
    name: str
    configs: list[HeadConfig]


def config1_space() -> SweepSpace:
    """Preset 1: learning-rate grid only; 25 epochs, dropout 0.1, hidden 1024, 3 layers."""
    rates = (0.001, 0.0005, 0.0003, 0.0001, 5e-5)
    configs = [
        HeadConfig(hidden_dim=1024, num_layers=3, dropout=0.1, learning_rate=lr, epochs=25)
        for lr in rates
    ]
    return SweepSpace("config1", configs)


def config2_space() -> SweepSpace:
    """Preset 2: the full grid over skip, lr, width, depth, dropout, warmup, schedule."""
    configs = [
        HeadConfig(
            hidden_dim=hidden,
            num_layers=layers,
            dropout=dropout,
            skip_connection=skip,
            learning_rate=lr,
            epochs=25,
            warmup_epochs=warmup,
            schedule=schedule,
        )
        for skip, lr, hidden, layers, dropout, warmup, schedule in itertools.product(
            (True, False),
            (0.0005, 0.0003, 0.0001),
            (512, 1024, 2048),
            (3, 4),
            (0.0, 0.1),
            (0, 5),
            ("constant", "linear-decay", "cosine"),
        )
    ]
    return SweepSpace("config2", configs)


SWEEP_PRESETS = {"config1": config1_space, "config2": config2_space}


# -- task data ------------------------------------------------------------------


@dataclass
class TaskData:
    """Labeled molecules for one downstream task, aligned with ``ids``."""

    ids: list[str]
    labels: LabelSet
    kind: str = "binary"  # regression | binary | multiclass
    num_classes: int = 2

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def out_dim(self) -> int:
        width = self.labels.values.shape[1]
        return width * self.num_classes if self.kind == "multiclass" else width


def gather_fingerprints(store: FingerprintStore, ids) -> np.ndarray:
    missing = [i for i in ids if i not in store]
    if missing:
        raise MissingFingerprint(f"ids absent from store: {missing[:10]}")
    return store.matrix(ids)


def random_split(n: int, valid_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded fallback split when no scaffold-split files are provided."""
    order = rng_stream(seed, "head-split").permutation(n)
    n_valid = max(1, math.floor(n * valid_fraction)) if n > 1 else 0
    return np.sort(order[n_valid:]), np.sort(order[:n_valid])


# -- the head model ---------------------------------------------------------------


class TrainedHead:
    """MLP over fingerprints; num_layers hidden layers then a linear readout."""

    def __init__(self, config: HeadConfig, in_dim: int, out_dim: int, kind: str, num_classes: int, seed: int):
        config.validate()
        self.config = config
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kind = kind
        self.num_classes = num_classes
        self.seed = seed
        self.params: list[Parameter] = []
        self.bn_states: list[BatchNormState] = []
        self.val_curve: list[float] = []
        self.best_epoch = -1
        init = rng_stream(seed, "head-params")
        widths = [in_dim] + [config.hidden_dim] * config.num_layers
        for layer in range(config.num_layers):
            fan_in, fan_out = widths[layer], widths[layer + 1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(
                Parameter(f"h{layer}/w", init.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32))
            )
            self.params.append(Parameter(f"h{layer}/b", np.zeros(fan_out, dtype=np.float32)))
            if config.normalization != "none":
                self.params.append(Parameter(f"h{layer}/gamma", np.ones(fan_out, dtype=np.float32)))
                self.params.append(Parameter(f"h{layer}/beta", np.zeros(fan_out, dtype=np.float32)))
            if config.normalization == "batch":
                self.bn_states.append(BatchNormState(fan_out))
        limit = math.sqrt(6.0 / (config.hidden_dim + out_dim))
        self.params.append(
            Parameter("out/w", init.uniform(-limit, limit, size=(config.hidden_dim, out_dim)).astype(np.float32))
        )
        self.params.append(Parameter("out/b", np.zeros(out_dim, dtype=np.float32)))
        self._by_name = {p.name: p for p in self.params}

    def forward(self, tape: Tape, x: np.ndarray, training: bool, step: int = 0):
        cfg = self.config
        h = tape.constant(np.asarray(x, dtype=np.float32))
        bn_index = 0
        for layer in range(cfg.num_layers):
            z = tape.linear(h, tape.watch(self._by_name[f"h{layer}/w"]), tape.watch(self._by_name[f"h{layer}/b"]))
            if cfg.normalization == "layer":
                z = tape.layer_norm(z, tape.watch(self._by_name[f"h{layer}/gamma"]), tape.watch(self._by_name[f"h{layer}/beta"]))
            elif cfg.normalization == "batch":
                z = tape.batch_norm(
                    z,
                    tape.watch(self._by_name[f"h{layer}/gamma"]),
                    tape.watch(self._by_name[f"h{layer}/beta"]),
                    self.bn_states[bn_index],
                    training,
                )
                bn_index += 1
            a = tape.relu(z)
            a = tape.dropout(a, cfg.dropout, (self.seed, layer, step), training)
            h = tape.add(a, h) if cfg.skip_connection and a.data.shape == h.data.shape else a
        return tape.linear(h, tape.watch(self._by_name["out/w"]), tape.watch(self._by_name["out/b"]))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probabilities for classification, raw values for regression."""
        logits = self.forward(Tape(recording=False), x, training=False).data
        if self.kind == "binary":
            return 1.0 / (1.0 + np.exp(-logits))
        if self.kind == "multiclass":
            rows = logits.shape[0]
            z = logits.reshape(rows, -1, self.num_classes)
            z = z - z.max(axis=2, keepdims=True)
            e = np.exp(z)
            return (e / e.sum(axis=2, keepdims=True)).reshape(rows, -1)
        return logits

    def snapshot(self) -> list[np.ndarray]:
        values = [p.value.copy() for p in self.params]
        values += [s.running_mean.copy() for s in self.bn_states]
        values += [s.running_var.copy() for s in self.bn_states]
        return values

    def restore(self, snapshot: list[np.ndarray]) -> None:
        k = len(self.params)
        for p, value in zip(self.params, snapshot[:k]):
            p.value[...] = value
        n_bn = len(self.bn_states)
        for state, mean in zip(self.bn_states, snapshot[k : k + n_bn]):
            state.running_mean[...] = mean
        for state, var in zip(self.bn_states, snapshot[k + n_bn :]):
            state.running_var[...] = var


def _head_loss(tape: Tape, head: TrainedHead, pred, labels: LabelSet):
    if head.kind == "regression":
        return mae_loss(tape, pred, labels)
    if head.kind == "binary":
        return bce_loss(tape, pred, labels)
    return hce_loss(tape, pred, labels, head.num_classes)


def train_head(
    store: FingerprintStore,
    data: TaskData,
    config: HeadConfig,
    seed: int,
    train_idx: np.ndarray | None = None,
    valid_idx: np.ndarray | None = None,
) -> TrainedHead:
    """Train one MLP head with Adam under the config schedule.

    The returned head carries its per-epoch validation losses and is restored
    to the best-validation epoch.  Provide explicit train/valid row indices
    (e.g. from scaffold-split files); otherwise a seeded 10% split is used.
    """
    config.validate()
    features = gather_fingerprints(store, data.ids)
    if train_idx is None or valid_idx is None:
        train_idx, valid_idx = random_split(len(data), 0.1, seed)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    valid_idx = np.asarray(valid_idx, dtype=np.int64)

    head = TrainedHead(config, features.shape[1], data.out_dim, data.kind, data.num_classes, seed)
    optimizer = OptimizerState(head.params)
    schedule = TrainConfig(
        epochs=config.epochs,
        peak_lr=config.learning_rate,
        warmup_epochs=config.warmup_epochs,
        schedule=config.schedule,
        batch_size=config.batch_size,
        seed=seed,
    )
    batches_per_epoch = max(1, math.ceil(len(train_idx) / config.batch_size))
    total_steps = config.epochs * batches_per_epoch

    best = math.inf
    best_snapshot = head.snapshot()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng_stream(seed, "head-batches", epoch).permutation(len(train_idx))
        shuffled = train_idx[order]
        epoch_losses = []
        for start in range(0, len(shuffled), config.batch_size):
            rows = shuffled[start : start + config.batch_size]
            for p in head.params:
                p.zero_grad()
            tape = Tape()
            pred = head.forward(tape, features[rows], training=True, step=step)
            loss = _head_loss(tape, head, pred, data.labels.rows(rows))
            if loss.requires_grad:
                tape.backward(loss)
                adam_step(head.params, optimizer, lr_at((step + 1) / total_steps, schedule))
            epoch_losses.append(float(loss.data))
            step += 1
        if len(valid_idx):
            tape = Tape(recording=False)
            pred = head.forward(tape, features[valid_idx], training=False)
            val = float(_head_loss(tape, head, pred, data.labels.rows(valid_idx)).data)
        else:
            val = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        head.val_curve.append(val)
        if val < best:
            best = val
            head.best_epoch = epoch
            best_snapshot = head.snapshot()
    head.restore(best_snapshot)
    return head


# -- metrics ---------------------------------------------------------------------


def midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the midrank statistic (tie-aware)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes present")
    ranks = midranks(scores)
    pos_sum = ranks[labels == 1].sum()
    return float((pos_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve by step integration over thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or int((labels == 0).sum()) == 0:
        raise SingleClass("AUPRC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i : j + 1] == 1).sum())
        fp += int((sorted_labels[i : j + 1] == 0).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def mae(pred, labels) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.abs(pred - labels).mean())


def spearman_rho(x, y) -> tuple[float, float]:
    """Spearman correlation with a two-sided p-value.

    rho is the Pearson correlation of midrank-transformed values.  The
    p-value is exact (all n! rank permutations) for n <= 8 and uses the
    Student-t approximation with n-2 degrees of freedom otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ZeroVariance("an input has zero variance")

    rx = midranks(x)
    ry = midranks(y)

    def pearson(a, b):
        a = a - a.mean()
        b = b - b.mean()
        return float((a * b).sum() / math.sqrt((a * a).sum() * (b * b).sum()))

    rho = pearson(rx, ry)

    if n <= 8:
        rxc = rx - rx.mean()
        denom_x = math.sqrt((rxc * rxc).sum())
        hits = 0
        total = 0
        for perm in itertools.permutations(range(n)):
            ryp = ry[list(perm)]
            ryc = ryp - ryp.mean()
            r = float((rxc * ryc).sum() / (denom_x * math.sqrt((ryc * ryc).sum())))
            if abs(r) >= abs(rho) - 1e-12:
                hits += 1
            total += 1
        return rho, hits / total

    if abs(rho) >= 1.0 - 1e-15:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), df=n - 2))
    return rho, min(p, 1.0)


METRICS = {
    "auroc": (auroc, True),
    "auprc": (auprc, True),
    "mae": (mae, False),
    "spearman": (lambda p, l: spearman_rho(p, l)[0], True),
}


def compute_metric(name: str, pred: np.ndarray, labels: np.ndarray) -> float:
    fn, _ = METRICS[name]
    return fn(np.asarray(pred).ravel(), np.asarray(labels).ravel())


def metric_higher_is_better(name: str) -> bool:
    return METRICS[name][1]


# -- sweeping and ensembling -------------------------------------------------------


@dataclass
class SweepRow:
    config: HeadConfig
    val_loss: float
    best_epoch: int


def sweep(
    space: SweepSpace,
    store: FingerprintStore,
    data: TaskData,
    seed: int,
    train_idx: np.ndarray | None = None,
    valid_idx: np.ndarray | None = None,
) -> tuple[HeadConfig, list[SweepRow]]:
    """Evaluate every grid point on one fixed seed; smallest validation loss wins.

    The returned argmin is canonical: ties break on the lexicographic config
    tuple, so enumeration order cannot change the winner.
    """
    if not space.configs:
        raise ValueError("sweep space is empty")
    if train_idx is None or valid_idx is None:
        train_idx, valid_idx = random_split(len(data), 0.1, seed)
    rows = []
    for config in space.configs:
        head = train_head(store, data, config, seed, train_idx, valid_idx)
        rows.append(SweepRow(config=config, val_loss=min(head.val_curve), best_epoch=head.best_epoch))
    best = min(rows, key=lambda r: (r.val_loss, r.config.key()))
    return best.config, rows


def kfold_partition(n: int, num_folds: int, seed: int) -> list[np.ndarray]:
    """Disjoint, exhaustive, seed-deterministic folds of range(n)."""
    if num_folds < 2:
        raise ValueError("num_folds must be >= 2")
    if n < num_folds:
        raise FoldTooSmall(f"cannot split {n} examples into {num_folds} folds")
    order = rng_stream(seed, "kfold").permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, num_folds)]


def ensemble_predict(heads: list[TrainedHead], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member outputs (probabilities for classification).

    Accumulates in float64 so an ensemble of identical members reproduces the
    single member's output exactly.
    """
    outputs = np.asarray([head.predict(x) for head in heads], dtype=np.float64)
    return outputs.sum(axis=0) / len(heads)


@dataclass
class RepetitionResult:
    seed: int
    fold_val_scores: list[float]
    val_score: float
    test_score: float


@dataclass
class EnsembleResult:
    metric: str
    higher_is_better: bool
    num_folds: int
    repetitions: list[RepetitionResult] = field(default_factory=list)

    @property
    def val_mean(self) -> float:
        return float(np.mean([r.val_score for r in self.repetitions]))

    @property
    def val_std(self) -> float:
        return float(np.std([r.val_score for r in self.repetitions]))

    @property
    def test_mean(self) -> float:
        return float(np.mean([r.test_score for r in self.repetitions]))

    @property
    def test_std(self) -> float:
        return float(np.std([r.test_score for r in self.repetitions]))

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "num_folds": self.num_folds,
            "num_reps": len(self.repetitions),
            "val_mean": self.val_mean,
            "val_std": self.val_std,
            "test_mean": self.test_mean,
            "test_std": self.test_std,
        }


def kfold_ensemble(
    store: FingerprintStore,
    data: TaskData,
    config: HeadConfig,
    num_folds: int = 5,
    num_reps: int = 5,
    metric: str = "auroc",
    train_rows: np.ndarray | None = None,
    test_rows: np.ndarray | None = None,
    seed: int = 0,
) -> EnsembleResult:
    """Fold-ensemble evaluation: per repetition, one model per fold (best epoch
    by validation loss), ensemble = mean of fold-model outputs, metrics on
    validation (mean over held-out folds) and on the test partition."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if train_rows is None or test_rows is None:
        order = rng_stream(seed, "ensemble-split").permutation(len(data))
        split = max(1, int(round(len(data) * 0.8)))
        train_rows = np.sort(order[:split])
        test_rows = np.sort(order[split:])
    train_rows = np.asarray(train_rows, dtype=np.int64)
    test_rows = np.asarray(test_rows, dtype=np.int64)
    features = gather_fingerprints(store, data.ids)
    if num_reps == 1:
        warnings.warn("std over a single repetition is reported as 0", stacklevel=2)

    result = EnsembleResult(metric=metric, higher_is_better=metric_higher_is_better(metric), num_folds=num_folds)
    for rep in range(num_reps):
        rep_seed = derive_seed(seed, "ensemble-rep", rep)
        folds = kfold_partition(len(train_rows), num_folds, rep_seed)
        if any(len(f) == 0 for f in folds):
            raise FoldTooSmall("a fold has zero validation examples")
        heads = []
        fold_scores = []
        for fold_id, fold in enumerate(folds):
            held_out = train_rows[fold]
            train_part = train_rows[np.concatenate([f for j, f in enumerate(folds) if j != fold_id])]
            head = train_head(store, data, config, rep_seed + fold_id, train_part, held_out)
            heads.append(head)
            pred = head.predict(features[held_out])
            fold_scores.append(compute_metric(metric, pred, data.labels.values[held_out]))
        test_pred = ensemble_predict(heads, features[test_rows])
        test_score = compute_metric(metric, test_pred, data.labels.values[test_rows])
        result.repetitions.append(
            RepetitionResult(
                seed=rep_seed,
                fold_val_scores=fold_scores,
                val_score=float(np.mean(fold_scores)),
                test_score=test_score,
            )
        )
    return result


# -- correlation analysis -----------------------------------------------------------


@dataclass
class CorrelationTable:
    """Signed Spearman correlations with a significance mask (p < threshold)."""

    row_names: list[str]
    col_names: list[str]
    values: np.ndarray  # signed rho, (rows, cols)
    p_values: np.ndarray
    significant: np.ndarray  # bool mask

    def masked_values(self) -> np.ndarray:
        out = self.values.copy()
        out[~self.significant] = np.nan
        return out


def correlation_analysis(
    pretrain_metrics: np.ndarray,
    downstream_metrics: np.ndarray,
    pretrain_signs: list[int],
    downstream_signs: list[int],
    pretrain_names: list[str] | None = None,
    downstream_names: list[str] | None = None,
    p_threshold: float = 0.1,
) -> CorrelationTable:
    """Sign-adjusted Spearman table over paired runs.

    Signs are +1 for higher-is-better metrics and -1 otherwise; each entry is
    rho * sign_pre * sign_down, masked as non-significant when p >= threshold.
    """
    pre = np.asarray(pretrain_metrics, dtype=np.float64)
    down = np.asarray(downstream_metrics, dtype=np.float64)
    if pre.ndim != 2 or down.ndim != 2 or pre.shape[0] != down.shape[0]:
        raise ValueError("metric matrices must be 2-D with equal run counts")
    if pre.shape[0] < 3:
        raise ValueError("need >= 3 paired runs")
    if len(pretrain_signs) != pre.shape[1] or len(downstream_signs) != down.shape[1]:
        raise ValueError("one sign per metric column required")
    rows, cols = pre.shape[1], down.shape[1]
    values = np.zeros((rows, cols))
    p_values = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            rho, p = spearman_rho(pre[:, i], down[:, j])
            values[i, j] = rho * pretrain_signs[i] * downstream_signs[j]
            p_values[i, j] = p
    return CorrelationTable(
        row_names=pretrain_names or [f"pretrain_{i}" for i in range(rows)],
        col_names=downstream_names or [f"downstream_{j}" for j in range(cols)],
        values=values,
        p_values=p_values,
        significant=p_values < p_threshold,
    )
