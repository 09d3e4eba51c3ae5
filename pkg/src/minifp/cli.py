"""Command-line entry point orchestrating the full pipeline deterministically.

Commands: featurize, pretrain, fingerprint, downstream, correlate.  Every
command under a fixed master seed is bit-reproducible end to end: output
files are byte-identical across reruns except wall-clock timings, which are
confined to timing files.  The MINIFP_SEED environment variable overrides
the master seed from any other source.

Exit codes: 0 success (including partial featurization failures), 2
usage/manifest errors, 3 unrecoverable IO, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from .autodiff import CorruptCheckpoint
from .backbones import (
    DEFAULT_WIDTHS,
    ModelConfig,
    build_model,
    count_parameters,
    load_model,
)
from .downstream import (
    SWEEP_PRESETS,
    HeadConfig,
    MissingFingerprint,
    TaskData,
    correlation_analysis,
    kfold_ensemble,
    sweep,
)
from .encodings import EigenFailure, assemble, feature_layout, global_seed_vector
from .fingerprints import (
    CorruptHeader,
    DimensionMismatch,
    extract_fingerprints,
    store_read,
    store_write,
    store_write_csv,
)
from .manifest import (
    ManifestError,
    ParseFailure,
    build_pretrain_dataset,
    config_defaults,
    format_config,
    load_config_file,
    load_downstream_manifest,
    load_manifest,
    read_downstream_labels,
    read_id_list,
    read_molecules,
)
from .multitask import LabelSet, LossWeights
from .seeding import rng_stream
from .trainer import NaNLossError, SplitSpec, TrainConfig, pretrain

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CACHE_MAGIC = b"MFFC"
CACHE_VERSION = 1


def _resolve_seed(args, config: dict) -> int:
    env = os.environ.get("MINIFP_SEED")
    if env is not None:
        return int(env)
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _write_failures(path: Path, failures) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "smiles", "error"])
        for failure in failures:
            writer.writerow([failure.row_index, failure.smiles, failure.error])


def _write_files_manifest(out_dir: Path, names: list[str]) -> None:
    with open(out_dir / "files.json", "w", encoding="utf-8") as fh:
        json.dump({"files": sorted(names)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- featurize -------------------------------------------------------------------


def write_feature_cache(path: Path, records, k_pe: int, rw_steps: int, seed: int, global_dim: int) -> None:
    """records: iterable of (molecule_id, smiles, graph, AssembledFeatures)."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<BIIIqI", CACHE_VERSION, k_pe, rw_steps, global_dim, seed, len(records)))
        fh.write(np.ascontiguousarray(global_seed_vector(seed, global_dim), dtype="<f4").tobytes())
        for molecule_id, smiles, graph, feats in records:
            for text in (molecule_id, smiles):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(struct.pack("<II", graph.num_atoms, graph.num_bonds))
            for bond in graph.bonds:
                fh.write(struct.pack("<II", bond.u, bond.v))
            fh.write(np.ascontiguousarray(feats.node_features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(feats.edge_features, dtype="<f4").tobytes())


def read_feature_cache(path: Path):
    """Inverse of write_feature_cache; returns (header dict, record list)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ManifestError(f"{path}: not a feature cache")
        version, k_pe, rw_steps, global_dim, seed, count = struct.unpack("<BIIIqI", fh.read(25))
        if version != CACHE_VERSION:
            raise ManifestError(f"{path}: unsupported cache version {version}")
        layout = feature_layout(k_pe, rw_steps)
        node_width = sum(c["width"] for c in layout["node"])
        edge_width = sum(c["width"] for c in layout["edge"])
        global_seed = np.frombuffer(fh.read(4 * global_dim), dtype="<f4").copy()
        records = []
        for _ in range(count):
            texts = []
            for _ in range(2):
                (length,) = struct.unpack("<H", fh.read(2))
                texts.append(fh.read(length).decode("utf-8"))
            n, m = struct.unpack("<II", fh.read(8))
            bonds = [struct.unpack("<II", fh.read(8)) for _ in range(m)]
            node = np.frombuffer(fh.read(4 * n * node_width), dtype="<f4").reshape(n, node_width).copy()
            edge = np.frombuffer(fh.read(4 * m * edge_width), dtype="<f4").reshape(m, edge_width).copy()
            records.append({"id": texts[0], "smiles": texts[1], "bonds": bonds, "node": node, "edge": edge})
        header = {
            "k_pe": k_pe,
            "rw_steps": rw_steps,
            "global_dim": global_dim,
            "seed": seed,
            "global_seed": global_seed,
        }
        return header, records


def cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    config = config_defaults()
    if args.config:
        config.update(load_config_file(args.config))
    seed = _resolve_seed(args, config)
    k_pe, rw_steps = config["k_pe"], config["rw_steps"]
    global_dim = config.get("d_global") or 64

    molecules, failures = read_molecules(manifest)
    records = []
    for mol in molecules:
        try:
            feats = assemble(mol.graph, k_pe, rw_steps, seed, global_dim)
        except EigenFailure as exc:
            failures.append(ParseFailure(row_index=mol.row_index, smiles=mol.smiles, error=str(exc)))
            continue
        records.append((mol.molecule_id, mol.smiles, mol.graph, feats))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_feature_cache(out_dir / "features.bin", records, k_pe, rw_steps, seed, global_dim)
    with open(out_dir / "layout.json", "w", encoding="utf-8") as fh:
        json.dump(feature_layout(k_pe, rw_steps), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_failures(out_dir / "failures.csv", failures)
    _write_files_manifest(out_dir, ["features.bin", "layout.json", "failures.csv", "files.json"])
    print(f"featurized {len(records)} molecules, {len(failures)} failures -> {out_dir}")
    return EXIT_OK


# -- pretrain --------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    manifest = load_manifest(args.manifest)
    config = config_defaults()
    if args.config:
        config.update(load_config_file(args.config))
    config["backbone"] = args.backbone
    seed = _resolve_seed(args, config)
    config["seed"] = seed

    widths = DEFAULT_WIDTHS[args.backbone]
    model_config = ModelConfig(
        backbone=args.backbone,
        num_layers=config["num_layers"],
        d_node=config.get("d_node") or widths[0],
        d_edge=config.get("d_edge") or widths[1],
        d_global=config.get("d_global") or widths[2],
        k_pe=config["k_pe"],
        rw_steps=config["rw_steps"],
        dropout=config["dropout"],
        seed=seed,
        gine_epsilon_mode=config["gine_epsilon_mode"],
        graph_head_input=config.get("graph_head_input")
        or ("global" if args.backbone == "mpnnpp" else "pooled"),
        pool=config["pool"],
        dtype=config["dtype"],
    )
    model_config.validate()
    config["d_node"], config["d_edge"], config["d_global"] = (
        model_config.d_node,
        model_config.d_edge,
        model_config.d_global,
    )
    config["graph_head_input"] = model_config.graph_head_input
    manifest.max_heavy_atoms = config["max_heavy"]

    dataset, tasks, failures, _ = build_pretrain_dataset(
        manifest, model_config.k_pe, model_config.rw_steps, seed, model_config.d_global
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.txt", "w", encoding="utf-8") as fh:
        fh.write(format_config(config))
    _write_failures(out_dir / "failures.csv", failures)

    model = build_model(model_config)
    params = count_parameters(model)
    print(f"{args.backbone}: {params} parameters, {len(dataset)} molecules, {len(tasks)} tasks")

    train_config = TrainConfig(
        epochs=config["epochs"],
        peak_lr=config["peak_lr"],
        warmup_epochs=config["warmup_epochs"],
        schedule=config["schedule"],
        batch_size=config["batch_size"],
        seed=seed,
    )
    split = SplitSpec(
        fractions=(config["train_fraction"], config["valid_fraction"], config["test_fraction"]),
        seed=seed,
    )
    log = pretrain(
        dataset,
        model,
        tasks,
        train_config,
        out_dir=out_dir,
        split=split,
        weights=LossWeights(k=config["k"]),
    )
    with open(out_dir / "param_count.txt", "w", encoding="utf-8") as fh:
        fh.write(f"{params}\n")
    _write_files_manifest(
        out_dir,
        [
            "run_config.txt",
            "failures.csv",
            "split.json",
            "best.ckpt",
            "best.ckpt.json",
            "final.ckpt",
            "final.ckpt.json",
            "log.jsonl",
            "timing.txt",
            "param_count.txt",
            "files.json",
        ],
    )
    print(f"best epoch {log.best_epoch} (valid total {log.best_valid:.6f}) -> {out_dir}")
    return EXIT_OK


# -- fingerprint -----------------------------------------------------------------


def _read_molecule_list(path: Path, smiles_col: str, id_col: str | None):
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            if smiles_col not in header:
                raise ManifestError(f"{path.name}: missing column {smiles_col!r}")
            if id_col and id_col not in header:
                raise ManifestError(f"{path.name}: missing column {id_col!r}")
            out = []
            for row in reader:
                smiles = (row.get(smiles_col) or "").strip()
                if not smiles:
                    continue
                if id_col:
                    out.append((row[id_col].strip(), smiles))
                else:
                    out.append(smiles)
            return out
    lines = path.read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.startswith("#")]


def cmd_fingerprint(args) -> int:
    model = load_model(args.checkpoint)
    expected = model.config.node_input_width
    got = model.params["embed_x/w1"].value.shape[0]
    if got != expected:
        raise DimensionMismatch(
            f"checkpoint embed width {got} conflicts with config width {expected}"
        )
    molecules = _read_molecule_list(Path(args.molecules), args.smiles_col, args.id_col)
    store, report = extract_fingerprints(model, molecules, method=args.pool, source=args.source)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    store_write(store, out)
    store_write_csv(store, str(out) + ".csv")
    if report.failures:
        with open(str(out) + ".failures.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["molecule", "error"])
            writer.writerows(report.failures)
    print(f"{len(store)} fingerprints (dim {store.dimension}), {len(report.failures)} failures -> {out}")
    return EXIT_OK


# -- downstream ------------------------------------------------------------------


def _head_config_from_file(path) -> HeadConfig:
    values = load_config_file(path)
    kwargs = {}
    mapping = {
        "epochs": "epochs",
        "peak_lr": "learning_rate",
        "warmup_epochs": "warmup_epochs",
        "schedule": "schedule",
        "batch_size": "batch_size",
        "dropout": "dropout",
    }
    for config_key, head_key in mapping.items():
        if config_key in values:
            kwargs[head_key] = values[config_key]
    if "d_node" in values:
        kwargs["hidden_dim"] = values["d_node"]
    if "num_layers" in values:
        kwargs["num_layers"] = values["num_layers"]
    return HeadConfig(**kwargs)


def cmd_downstream(args) -> int:
    store = store_read(args.store)
    task = load_downstream_manifest(args.task_manifest)
    ids, values, mask = read_downstream_labels(task)
    data = TaskData(ids=ids, labels=LabelSet(values, mask), kind=task.kind)
    seed = _resolve_seed(args, {})

    row_of = {molecule_id: i for i, molecule_id in enumerate(ids)}
    if "train" in task.splits and "test" in task.splits:
        train_ids = read_id_list(task.splits["train"])
        test_ids = read_id_list(task.splits["test"])
        missing = [i for i in train_ids + test_ids if i not in row_of]
        if missing:
            raise ManifestError(f"split ids absent from labels: {missing[:10]}")
        train_rows = np.array([row_of[i] for i in train_ids], dtype=np.int64)
        test_rows = np.array([row_of[i] for i in test_ids], dtype=np.int64)
    else:
        order = rng_stream(seed, "downstream-split").permutation(len(ids))
        cut = max(1, int(round(len(ids) * 0.8)))
        train_rows = np.sort(order[:cut])
        test_rows = np.sort(order[cut:])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = ["files.json"]

    inner_valid = max(1, len(train_rows) // 10)
    inner_order = rng_stream(seed, "sweep-split").permutation(len(train_rows))
    sweep_valid = np.sort(train_rows[inner_order[:inner_valid]])
    sweep_train = np.sort(train_rows[inner_order[inner_valid:]])

    if args.sweep != "none":
        space = SWEEP_PRESETS[args.sweep]()
        best_config, rows = sweep(space, store, data, seed, sweep_train, sweep_valid)
        with open(out_dir / "sweep_table.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["hidden_dim", "num_layers", "dropout", "normalization", "skip_connection",
                 "learning_rate", "epochs", "warmup_epochs", "schedule", "val_loss", "best_epoch"]
            )
            for row in rows:
                c = row.config
                writer.writerow(
                    [c.hidden_dim, c.num_layers, c.dropout, c.normalization, c.skip_connection,
                     repr(c.learning_rate), c.epochs, c.warmup_epochs, c.schedule,
                     repr(row.val_loss), row.best_epoch]
                )
        produced.append("sweep_table.csv")
    elif args.head_config:
        best_config = _head_config_from_file(args.head_config)
    else:
        best_config = HeadConfig()

    with open(out_dir / "chosen_config.json", "w", encoding="utf-8") as fh:
        json.dump(best_config.__dict__, fh, indent=2, sort_keys=True)
        fh.write("\n")
    produced.append("chosen_config.json")

    result = kfold_ensemble(
        store,
        data,
        best_config,
        num_folds=args.folds,
        num_reps=args.reps,
        metric=task.metric,
        train_rows=train_rows,
        test_rows=test_rows,
        seed=seed,
    )
    with open(out_dir / "ensemble.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["repetition", "fold", "val_score"])
        for rep_index, rep in enumerate(result.repetitions):
            for fold_index, score in enumerate(rep.fold_val_scores):
                writer.writerow([rep_index, fold_index, repr(score)])
    summary = result.summary()
    summary["task"] = task.task_name
    summary["higher_is_better"] = result.higher_is_better
    with open(out_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        keys = ["task", "metric", "higher_is_better", "num_folds", "num_reps",
                "val_mean", "val_std", "test_mean", "test_std"]
        writer.writerow(keys)
        writer.writerow([repr(summary[k]) if isinstance(summary[k], float) else summary[k] for k in keys])
    produced += ["ensemble.csv", "summary.csv"]
    _write_files_manifest(out_dir, produced)
    print(
        f"{task.task_name} [{task.metric}]: test {result.test_mean:.4f} +/- {result.test_std:.4f} "
        f"(val {result.val_mean:.4f} +/- {result.val_std:.4f}) -> {out_dir}"
    )
    return EXIT_OK


# -- correlate -------------------------------------------------------------------


def _pretrain_metrics_from_log(path: Path) -> dict[str, float]:
    """Per-group validation losses at the best epoch and the final epoch."""
    records = []
    best = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            entry = json.loads(line)
            if "epoch" in entry:
                records.append(entry)
            elif "best_epoch" in entry:
                best = entry["best_epoch"]
    if not records:
        raise ManifestError(f"{path}: empty training log")
    final = records[-1]
    best_record = records[best - 1] if best and 1 <= best <= len(records) else final
    out = {}
    for tag, record in (("best", best_record), ("final", final)):
        for group, value in record["valid"].items():
            out[f"valid/{group}/{tag}"] = float(value)
    return out


def cmd_correlate(args) -> int:
    log_paths = sorted(globlib.glob(args.pretrain_logs))
    runs = {}
    for raw in log_paths:
        path = Path(raw)
        run_name = path.parent.name if path.name == "log.jsonl" else path.stem
        runs[run_name] = _pretrain_metrics_from_log(path)

    downstream: dict[str, dict[str, float]] = {}
    signs: dict[str, int] = {}
    with open(args.downstream_results, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for needed in ("run", "metric", "value", "higher_is_better"):
            if needed not in header:
                raise ManifestError(f"downstream results missing column {needed!r}")
        for row in reader:
            run = row["run"].strip()
            metric = row["metric"].strip()
            downstream.setdefault(run, {})[metric] = float(row["value"])
            signs[metric] = 1 if row["higher_is_better"].strip().lower() in ("true", "1", "yes") else -1

    paired = sorted(set(runs) & set(downstream))
    if len(paired) < 3:
        raise ManifestError(f"need >= 3 paired runs, got {len(paired)}")

    pretrain_names = sorted({name for run in paired for name in runs[run]})
    downstream_names = sorted({name for run in paired for name in downstream[run]})
    pre = np.array([[runs[run][name] for name in pretrain_names] for run in paired])
    down = np.array([[downstream[run][name] for name in downstream_names] for run in paired])

    # Logged pre-training metrics are validation losses (lower better) except
    # the per-task AUROC entries.
    pretrain_signs = [1 if name.split("/")[1].startswith("auroc") else -1 for name in pretrain_names]
    table = correlation_analysis(
        pre,
        down,
        pretrain_signs=pretrain_signs,
        downstream_signs=[signs[name] for name in downstream_names],
        pretrain_names=pretrain_names,
        downstream_names=downstream_names,
    )
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pretrain_metric", "downstream_metric", "signed_rho", "p_value", "significant"])
        for i, row_name in enumerate(table.row_names):
            for j, col_name in enumerate(table.col_names):
                writer.writerow(
                    [row_name, col_name, repr(float(table.values[i, j])),
                     repr(float(table.p_values[i, j])), bool(table.significant[i, j])]
                )
    print(f"correlated {len(paired)} runs: {len(pretrain_names)}x{len(downstream_names)} table -> {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minifp",
        description="Molecular fingerprinting pipeline: featurize, pre-train, fingerprint, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="cache assembled features for a molecule manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="multi-task pre-training of one backbone")
    p.add_argument("manifest")
    p.add_argument("--backbone", choices=("gcn", "gine", "mpnnpp"), required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fingerprint", help="extract fingerprints with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("molecules", help="CSV (with --smiles-col) or one SMILES per line")
    p.add_argument("--pool", choices=("sum", "mean", "max"), default="max")
    p.add_argument("--source", choices=("nodes", "global"), default="nodes")
    p.add_argument("--out", required=True)
    p.add_argument("--smiles-col", default="smiles")
    p.add_argument("--id-col")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("downstream", help="sweep and fold-ensemble a task head on fingerprints")
    p.add_argument("store")
    p.add_argument("task_manifest")
    p.add_argument("--sweep", choices=("config1", "config2", "none"), default="config1")
    p.add_argument("--head-config", help="flat config file used when --sweep none")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("correlate", help="signed correlation table between runs")
    p.add_argument("pretrain_logs", help="glob of pretrain log.jsonl files")
    p.add_argument("downstream_results", help="CSV: run, metric, value, higher_is_better")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, CorruptHeader, CorruptCheckpoint, DimensionMismatch, MissingFingerprint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EigenFailure, NaNLossError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
