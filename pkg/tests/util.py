"""Shared helpers for building and permuting molecular graphs in tests."""

from __future__ import annotations

import dataclasses

import numpy as np

from minifp.encodings import assemble
from minifp.molgraph import Atom, Bond, MolecularGraph, annotate
from minifp.multitask import LabelSet, TaskSpec
from minifp.trainer import PretrainDataset

TOY_SMILES = [
    "CCO", "CCN", "CCC", "CC(C)C", "c1ccccc1", "c1ccncc1", "CC(=O)O",
    "CCCl", "CCBr", "C1CC1", "C1CCC1", "C1CCCC1", "CC(N)C(=O)O", "CCOC",
    "CC#N", "C=CC=C", "CC(C)O", "CCS", "C1CCCCC1", "c1ccc(C)cc1",
    "OCC(O)CO", "CC(=O)N", "CCOCC", "CC(C)(C)O", "NCCN", "OCCO",
    "CC=CC", "C#CC", "c1ccoc1", "c1ccsc1", "CNC", "COC(=O)C",
]

ELEMENT_POOL = ["C", "C", "C", "N", "O", "S"]
ORDER_POOL = ["single", "single", "single", "double"]


def random_molecule(rng: np.random.Generator, max_atoms: int = 12) -> MolecularGraph:
    """Random connected molecule-like graph: a tree plus up to two ring bonds."""
    n = int(rng.integers(2, max_atoms + 1))
    atoms = [Atom(element=str(rng.choice(ELEMENT_POOL))) for _ in range(n)]
    bonds = []
    present = set()
    degrees = [0] * n
    for i in range(1, n):
        candidates = [j for j in range(i) if degrees[j] < 4]
        j = int(rng.choice(candidates)) if candidates else int(rng.integers(0, i))
        bonds.append(Bond(j, i, order=str(rng.choice(ORDER_POOL))))
        present.add((j, i))
        degrees[j] += 1
        degrees[i] += 1
    for _ in range(int(rng.integers(0, 3))):
        u, v = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (u, v) in present or degrees[u] >= 4 or degrees[v] >= 4:
            continue
        bonds.append(Bond(u, v, order="single"))
        present.add((u, v))
        degrees[u] += 1
        degrees[v] += 1
    graph = MolecularGraph(atoms=atoms, bonds=bonds, source_text=f"<random-{n}>")
    return annotate(graph)


def permute_graph(graph: MolecularGraph, perm: np.ndarray) -> MolecularGraph:
    """Relabel atoms so old atom i becomes new atom perm[i]."""
    n = graph.num_atoms
    new_atoms: list[Atom | None] = [None] * n
    for i, atom in enumerate(graph.atoms):
        new_atoms[int(perm[i])] = dataclasses.replace(atom)
    new_bonds = [
        Bond(
            int(perm[b.u]),
            int(perm[b.v]),
            order=b.order,
            in_ring=b.in_ring,
            conjugated=b.conjugated,
        )
        for b in graph.bonds
    ]
    permuted = MolecularGraph(atoms=new_atoms, bonds=new_bonds, source_text=graph.source_text)
    permuted.validate()
    return permuted


def toy_tasks() -> list[TaskSpec]:
    return [
        TaskSpec("gap", "graph", "regression", "MAE", 1, "G25"),
        TaskSpec("assay", "graph", "binary", "BCE", 2, "PCBA"),
        TaskSpec("charge", "node", "regression", "MAE", 1, "N4"),
    ]


def build_toy_dataset(smiles=None, k_pe=2, rw_steps=3, seed=0) -> tuple[PretrainDataset, list[TaskSpec]]:
    """Small multi-task set: two graph tasks plus one node task, sparse masks."""
    from minifp.molgraph import parse_smiles

    smiles = smiles if smiles is not None else TOY_SMILES
    graphs = [parse_smiles(s) for s in smiles]
    feats = [assemble(g, k_pe, rw_steps, seed) for g in graphs]
    rng = np.random.default_rng(seed + 1)
    n = len(graphs)
    total_atoms = sum(g.num_atoms for g in graphs)
    tasks = toy_tasks()
    dataset = PretrainDataset(
        graphs=graphs,
        features=feats,
        graph_labels={
            "gap": LabelSet(rng.standard_normal((n, 1)), (rng.random((n, 1)) < 0.9).astype(float)),
            "assay": LabelSet(
                (rng.random((n, 2)) < 0.5).astype(float),
                (rng.random((n, 2)) < 0.8).astype(float),
            ),
        },
        node_labels={
            "charge": LabelSet(
                rng.standard_normal((total_atoms, 1)),
                (rng.random((total_atoms, 1)) < 0.7).astype(float),
            ),
        },
    )
    return dataset, tasks
