"""Pool final node embeddings into fingerprint vectors and persist them.

Pooling is sum, mean, or max over node rows; max is the default throughout
the pipeline (it gave the best downstream ranks in the pooling comparison,
and the sum/mean variants remain selectable everywhere).  Sum and mean use
canonical-order accumulation, so a relabeled molecule produces a bitwise
identical vector at a given precision.

Store file layout (little-endian): magic ``MFPS``, version byte, dimension
as uint32, record count as uint32, then per record a uint16 id length, the
id bytes, and ``dimension`` float32 values.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, canonical_column_sums
from .backbones import ModelState, batch_graphs, forward
from .encodings import assemble
from .molgraph import MolecularGraph, normalize_smiles, parse_smiles

STORE_MAGIC = b"MFPS"
STORE_VERSION = 1

POOL_METHODS = ("sum", "mean", "max")


class EmptyGraph(ValueError):
    pass


class CorruptHeader(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class Fingerprint:
    vector: np.ndarray


def pool(x_final: np.ndarray, method: str = "max") -> np.ndarray:
    """Reduce one graph's node embedding rows to a single vector."""
    x_final = np.asarray(x_final)
    if x_final.ndim != 2 or x_final.shape[0] == 0:
        raise EmptyGraph(f"cannot pool embedding of shape {x_final.shape}")
    if method == "sum":
        return canonical_column_sums(x_final)
    if method == "mean":
        return canonical_column_sums(x_final) / x_final.shape[0]
    if method == "max":
        return x_final.max(axis=0)
    raise ValueError(f"unknown pooling method {method!r}")


class FingerprintStore:
    """Ordered (molecule id -> vector) map with a fixed dimension."""

    def __init__(self, dimension: int):
        self.dimension = int(dimension)
        self._ids: list[str] = []
        self._vectors: list[np.ndarray] = []
        self._index: dict[str, int] = {}

    def add(self, molecule_id: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dimension,):
            raise DimensionMismatch(
                f"vector shape {vector.shape} does not match store dimension {self.dimension}"
            )
        if molecule_id in self._index:
            raise ValueError(f"duplicate molecule id {molecule_id!r}")
        self._index[molecule_id] = len(self._ids)
        self._ids.append(molecule_id)
        self._vectors.append(vector)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, molecule_id: str) -> bool:
        return molecule_id in self._index

    def ids(self) -> list[str]:
        return list(self._ids)

    def get(self, molecule_id: str) -> np.ndarray:
        return self._vectors[self._index[molecule_id]]

    def matrix(self, ids=None) -> np.ndarray:
        if ids is None:
            return np.stack(self._vectors) if self._vectors else np.zeros((0, self.dimension), dtype=np.float32)
        return np.stack([self.get(i) for i in ids])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FingerprintStore):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self._ids == other._ids
            and all(np.array_equal(a, b) for a, b in zip(self._vectors, other._vectors))
        )


@dataclass
class ExtractionReport:
    """Per-molecule failures collected during extraction (batch never aborts)."""

    failures: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


def extract_fingerprints(
    model: ModelState,
    molecules,
    method: str | None = None,
    source: str = "nodes",
    batch_size: int = 32,
) -> tuple[FingerprintStore, ExtractionReport]:
    """Fingerprint every unique molecule with a single forward pass each.

    ``molecules`` holds SMILES strings or (id, SMILES) pairs; without an id
    the normalized SMILES is used.  Duplicates (by normalized SMILES) keep
    the first occurrence.  ``source="global"`` reads the per-graph global
    embedding instead of pooled node embeddings.  Parse or eigensolver
    failures are collected in the report instead of aborting.
    """
    cfg = model.config
    method = method or cfg.pool
    if method not in POOL_METHODS:
        raise ValueError(f"unknown pooling method {method!r}")
    if source not in ("nodes", "global"):
        raise ValueError(f"unknown fingerprint source {source!r}")
    dimension = cfg.d_global if source == "global" else cfg.d_node
    store = FingerprintStore(dimension)
    report = ExtractionReport(failures=[])

    pending: list[tuple[str, MolecularGraph]] = []
    seen: set[str] = set()
    for item in molecules:
        molecule_id, smiles = item if isinstance(item, tuple) else (None, item)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                key = normalize_smiles(smiles)
                graph = parse_smiles(smiles)
        except Exception as exc:  # collected, not raised
            report.failures.append((molecule_id or smiles, str(exc)))
            continue
        if key in seen:
            continue
        seen.add(key)
        pending.append((molecule_id or key, graph))

    for start in range(0, len(pending), batch_size):
        chunk = pending[start : start + batch_size]
        featurized = []
        for molecule_id, graph in chunk:
            try:
                feats = assemble(graph, cfg.k_pe, cfg.rw_steps, cfg.seed, cfg.d_global)
            except Exception as exc:
                report.failures.append((molecule_id, str(exc)))
                continue
            featurized.append((molecule_id, graph, feats))
        if not featurized:
            continue
        batch = batch_graphs(
            [g for _, g, _ in featurized], [f for _, _, f in featurized], dtype=cfg.np_dtype
        )
        result = forward(Tape(recording=False), batch, model, training=False)
        if source == "global":
            for row, (molecule_id, _, _) in enumerate(featurized):
                store.add(molecule_id, result.g.data[row])
        else:
            offset = 0
            for molecule_id, graph, _ in featurized:
                rows = result.x.data[offset : offset + graph.num_atoms]
                store.add(molecule_id, pool(rows, method))
                offset += graph.num_atoms
    return store, report


def store_write(store: FingerprintStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<B", STORE_VERSION))
        fh.write(struct.pack("<II", store.dimension, len(store)))
        for molecule_id in store.ids():
            raw = molecule_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(store.get(molecule_id), dtype="<f4").tobytes())


def store_read(path, expect_dimension: int | None = None) -> FingerprintStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != STORE_MAGIC:
            raise CorruptHeader(f"bad magic {magic!r}")
        head = fh.read(9)
        if len(head) != 9:
            raise CorruptHeader("truncated header")
        version, dimension, count = struct.unpack("<BII", head)
        if version != STORE_VERSION:
            raise CorruptHeader(f"unsupported store version {version}")
        if expect_dimension is not None and dimension != expect_dimension:
            raise DimensionMismatch(f"store dimension {dimension}, expected {expect_dimension}")
        store = FingerprintStore(dimension)
        for _ in range(count):
            raw_len = fh.read(2)
            if len(raw_len) != 2:
                raise CorruptHeader("truncated record")
            (id_len,) = struct.unpack("<H", raw_len)
            molecule_id = fh.read(id_len)
            payload = fh.read(4 * dimension)
            if len(molecule_id) != id_len or len(payload) != 4 * dimension:
                raise CorruptHeader("truncated record")
            store.add(molecule_id.decode("utf-8"), np.frombuffer(payload, dtype="<f4").copy())
    return store


def store_write_csv(store: FingerprintStore, path) -> None:
    """Interoperability export: one row per molecule, id then v0..v{d-1}."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = ",".join(["id"] + [f"v{i}" for i in range(store.dimension)])
        fh.write(header + "\n")
        for molecule_id in store.ids():
            values = ",".join(repr(float(v)) for v in store.get(molecule_id))
            fh.write(f"{molecule_id},{values}\n")
