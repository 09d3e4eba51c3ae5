import numpy as np
import pytest

from minifp.backbones import ModelConfig, build_model
from minifp.fingerprints import (
    CorruptHeader,
    DimensionMismatch,
    EmptyGraph,
    FingerprintStore,
    extract_fingerprints,
    pool,
    store_read,
    store_write,
    store_write_csv,
)

from .util import random_molecule


def small_model(backbone="gine", **overrides):
    base = dict(
        backbone=backbone, num_layers=2, d_node=6, d_edge=6, d_global=6,
        k_pe=2, rw_steps=3, seed=0,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return build_model(cfg)


def test_pool_methods():
    rows = np.array([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_array_equal(pool(rows, "sum"), [4.0, 2.0])
    np.testing.assert_array_equal(pool(rows, "mean"), [2.0, 1.0])
    np.testing.assert_array_equal(pool(rows, "max"), [3.0, 2.0])


def test_pool_single_node():
    row = np.array([[0.5, -1.5, 2.0]])
    for method in ("sum", "mean", "max"):
        np.testing.assert_array_equal(pool(row, method), row[0])


def test_pool_empty_graph():
    with pytest.raises(EmptyGraph):
        pool(np.zeros((0, 4)), "max")


def test_pool_permutation_invariant_bitwise():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((17, 5))
    for method in ("sum", "mean", "max"):
        base = pool(rows, method)
        for _ in range(10):
            shuffled = rows[rng.permutation(17)]
            assert np.array_equal(pool(shuffled, method), base)


def test_pool_sum_equals_n_times_mean():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((9, 4))
    np.testing.assert_allclose(pool(rows, "sum"), 9 * pool(rows, "mean"), rtol=1e-12)


def test_store_rejects_wrong_dimension_and_duplicates():
    store = FingerprintStore(3)
    store.add("a", np.zeros(3))
    with pytest.raises(DimensionMismatch):
        store.add("b", np.zeros(4))
    with pytest.raises(ValueError):
        store.add("a", np.ones(3))


def test_extract_dedups_and_orders():
    model = small_model()
    store, report = extract_fingerprints(model, ["CCO", " CCO", "CCN", "CCO"])
    assert report.ok
    assert len(store) == 2
    assert store.ids() == ["CCO", "CCN"]


def test_extract_collects_failures():
    model = small_model()
    store, report = extract_fingerprints(model, ["CCO", "C(", "CCN"])
    assert len(store) == 2
    assert len(report.failures) == 1
    assert report.failures[0][0] == "C("


def test_extract_deterministic_store_bytes(tmp_path):
    model = small_model()
    molecules = ["CCO", "c1ccccc1", "CC(C)O"]
    paths = []
    for name in ("one", "two"):
        store, _ = extract_fingerprints(model, molecules)
        path = tmp_path / f"{name}.mfps"
        store_write(store, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_extract_does_not_mutate_model():
    model = small_model()
    before = model.checksum()
    extract_fingerprints(model, ["CCO", "c1ccncc1"])
    assert model.checksum() == before


def test_extract_batching_matches_single(tmp_path):
    model = small_model()
    molecules = [f"{'C' * k}O" for k in range(1, 8)]
    batched, _ = extract_fingerprints(model, molecules, batch_size=4)
    single, _ = extract_fingerprints(model, molecules, batch_size=1)
    assert batched == single


def test_extract_global_source_dimension():
    model = small_model(backbone="mpnnpp", d_node=5, d_edge=4, d_global=7)
    store, _ = extract_fingerprints(model, ["CCO"], source="global")
    assert store.dimension == 7


def test_isomorphic_ring_spellings_identical_vectors():
    # C1CC1 relabelings share one adjacency matrix, so featurization and the
    # canonical pooled forward must agree to float32 resolution.
    model = small_model()
    store, _ = extract_fingerprints(model, [("a", "C1CC1"), ("b", "C2(CC2)")])
    assert len(store) == 2
    np.testing.assert_allclose(store.get("a"), store.get("b"), atol=1e-6)


def test_permutation_invariance_through_model():
    # Permute the model inputs (feature rows + edge indices): the fingerprint
    # must be bitwise identical at float64.  Refeaturizing a relabeled SMILES
    # is weaker because eigenvector sign canonicalization is order-dependent.
    from minifp.autodiff import Tape
    from minifp.backbones import GraphBatch, batch_graphs, forward
    from minifp.encodings import assemble

    model = small_model(dtype="float64")
    cfg = model.config
    rng = np.random.default_rng(5)
    for _ in range(5):
        g = random_molecule(rng)
        feats = assemble(g, cfg.k_pe, cfg.rw_steps, cfg.seed, cfg.d_global)
        batch = batch_graphs([g], [feats], dtype=np.float64)
        base_x = forward(Tape(recording=False), batch, model).x.data
        perm = rng.permutation(g.num_atoms)
        permuted = GraphBatch(
            node_features=batch.node_features[np.argsort(perm)],
            edge_features=batch.edge_features.copy(),
            senders=perm[batch.senders],
            receivers=perm[batch.receivers],
            node_graph_ids=batch.node_graph_ids.copy(),
            edge_graph_ids=batch.edge_graph_ids.copy(),
            num_graphs=1,
            node_counts=batch.node_counts.copy(),
        )
        perm_x = forward(Tape(recording=False), permuted, model).x.data
        for method in ("sum", "mean", "max"):
            assert np.array_equal(pool(base_x, method), pool(perm_x, method))


def test_store_round_trip(tmp_path):
    store = FingerprintStore(4)
    rng = np.random.default_rng(2)
    for i in range(5):
        store.add(f"mol-{i}", rng.standard_normal(4).astype(np.float32))
    path = tmp_path / "x.mfps"
    store_write(store, path)
    assert store_read(path) == store


def test_store_truncated_raises(tmp_path):
    store = FingerprintStore(4)
    store.add("m", np.ones(4, dtype=np.float32))
    path = tmp_path / "x.mfps"
    store_write(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CorruptHeader):
        store_read(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptHeader):
        store_read(path)


def test_store_dimension_check_on_read(tmp_path):
    store = FingerprintStore(4)
    store.add("m", np.ones(4, dtype=np.float32))
    path = tmp_path / "x.mfps"
    store_write(store, path)
    with pytest.raises(DimensionMismatch):
        store_read(path, expect_dimension=8)


def test_csv_export(tmp_path):
    store = FingerprintStore(2)
    store.add("CCO", np.array([1.5, -2.25], dtype=np.float32))
    path = tmp_path / "x.csv"
    store_write_csv(store, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "id,v0,v1"
    assert lines[1] == "CCO,1.5,-2.25"
