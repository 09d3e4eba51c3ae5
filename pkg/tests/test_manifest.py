import json

import numpy as np
import pytest

from minifp.manifest import (
    ManifestError,
    build_pretrain_dataset,
    config_defaults,
    format_config,
    load_downstream_manifest,
    load_manifest,
    parse_config_text,
    read_downstream_labels,
    read_exclusion_set,
    read_molecules,
)

from .test_cli import write_dataset


def test_load_manifest_fields(tmp_path):
    path = write_dataset(tmp_path)
    manifest = load_manifest(path)
    assert manifest.smiles_column == "smiles"
    assert manifest.id_column == "mol_id"
    assert [t.spec.name for t in manifest.tasks] == ["gap", "assay", "charge"]
    assert manifest.tasks[1].spec.label_width == 2
    assert manifest.tasks[2].spec.level == "node"


def test_manifest_missing_key(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"molecule_csv": "x.csv"}))
    with pytest.raises(ManifestError, match="smiles_column"):
        load_manifest(tmp_path / "m.json")


def test_manifest_bad_loss_kind(tmp_path):
    write_dataset(tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["tasks"][0]["loss"] = "BCE"  # regression + BCE mismatch
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "manifest.json")


def test_node_task_requires_node_csv(tmp_path):
    write_dataset(tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    del raw["tasks"][2]["node_csv"]
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match="node_csv"):
        load_manifest(tmp_path / "manifest.json")


def test_read_molecules_masks_empty_cells(tmp_path):
    manifest = load_manifest(write_dataset(tmp_path))
    molecules, failures = read_molecules(manifest)
    assert not failures
    has_empty = any(v is None for mol in molecules for v in mol.labels.values())
    has_value = any(v is not None for mol in molecules for v in mol.labels.values())
    assert has_empty and has_value


def test_build_pretrain_dataset_shapes(tmp_path):
    manifest = load_manifest(write_dataset(tmp_path))
    dataset, specs, failures, ids = build_pretrain_dataset(manifest, k_pe=2, rw_steps=3, seed=0, global_dim=8)
    assert not failures
    assert len(dataset) == len(ids) == 20
    assert dataset.graph_labels["gap"].values.shape == (20, 1)
    assert dataset.graph_labels["assay"].values.shape == (20, 2)
    total_atoms = sum(g.num_atoms for g in dataset.graphs)
    assert dataset.node_labels["charge"].values.shape == (total_atoms, 1)
    assert [s.name for s in specs] == ["gap", "assay", "charge"]


def test_heavy_atom_filter_and_exclusion(tmp_path):
    path = write_dataset(tmp_path, smiles=["CCO", "C" * 120, "CCN"])
    (tmp_path / "excluded.smi").write_text("CCN\n")
    raw = json.loads(path.read_text())
    raw["exclusion_list"] = "excluded.smi"
    raw["max_heavy_atoms"] = 100
    path.write_text(json.dumps(raw))
    manifest = load_manifest(path)
    dataset, _, _, ids = build_pretrain_dataset(manifest, 2, 3, 0, 8)
    assert len(dataset) == 1  # long chain filtered, CCN excluded
    assert ids == ["mol0"]


def test_exclusion_set_normalizes(tmp_path):
    path = tmp_path / "x.smi"
    path.write_text(" C1CC1 \n# comment\n\n")
    excl = read_exclusion_set(path)
    assert "C1CC1" in excl
    from minifp.molgraph import normalize_smiles

    assert normalize_smiles("C2CC2") in excl


def test_node_label_out_of_range_atom(tmp_path):
    write_dataset(tmp_path, smiles=["CCO"])
    lines = (tmp_path / "node_labels.csv").read_text().strip().split("\n")
    lines.append("mol0,99,0.5")
    (tmp_path / "node_labels.csv").write_text("\n".join(lines) + "\n")
    manifest = load_manifest(tmp_path / "manifest.json")
    with pytest.raises(ManifestError, match="atom_index"):
        build_pretrain_dataset(manifest, 2, 3, 0, 8)


def test_parse_config_text():
    values = parse_config_text("epochs = 10\npeak_lr = 0.001  # comment\n\n# full comment\nbackbone = gcn\n")
    assert values == {"epochs": 10, "peak_lr": 0.001, "backbone": "gcn"}


def test_parse_config_unknown_key():
    with pytest.raises(ManifestError, match="unknown key"):
        parse_config_text("bogus = 3\n")


def test_parse_config_bad_value():
    with pytest.raises(ManifestError, match="bad int"):
        parse_config_text("epochs = ten\n")


def test_config_defaults_match_pipeline_constants():
    defaults = config_defaults()
    assert defaults["epochs"] == 100
    assert defaults["peak_lr"] == 3e-4
    assert defaults["warmup_epochs"] == 5
    assert defaults["num_layers"] == 16
    assert defaults["k"] == 5.0
    assert defaults["folds"] == 5
    assert defaults["reps"] == 5
    assert defaults["pool"] == "max"
    assert defaults["max_heavy"] == 100


def test_format_config_round_trip():
    values = {"epochs": 7, "backbone": "gcn", "peak_lr": 0.001}
    assert parse_config_text(format_config(values)) == values


def test_downstream_manifest_and_labels(tmp_path):
    with open(tmp_path / "labels.csv", "w") as fh:
        fh.write("mol_id,y\na,1\nb,\nc,0\n")
    (tmp_path / "task.json").write_text(json.dumps({
        "labels_csv": "labels.csv",
        "id_column": "mol_id",
        "task": {"name": "t", "kind": "binary", "columns": ["y"]},
    }))
    manifest = load_downstream_manifest(tmp_path / "task.json")
    assert manifest.metric == "auroc"
    ids, values, mask = read_downstream_labels(manifest)
    assert ids == ["a", "b", "c"]
    np.testing.assert_array_equal(mask.ravel(), [1, 0, 1])


def test_downstream_manifest_rejects_multiclass(tmp_path):
    (tmp_path / "task.json").write_text(json.dumps({
        "labels_csv": "labels.csv",
        "id_column": "mol_id",
        "task": {"name": "t", "kind": "multiclass", "columns": ["y"]},
    }))
    with pytest.raises(ManifestError):
        load_downstream_manifest(tmp_path / "task.json")
