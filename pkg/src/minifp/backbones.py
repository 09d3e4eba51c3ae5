"""Input embedding MLPs, the three GNN layer types, and the full layer stack.

Layer semantics:

* ``gcn``: x_i <- relu(W · sum_{j in N(i) ∪ {i}} x_j / sqrt(d_i d_j)) with the
  self-loop counted in the degrees, then dropout.  The weight-free
  aggregation is exposed separately as :func:`gcn_aggregate`.
* ``gine``: x_i <- MLP((1 + eps) · x_i + sum_j relu(x_j + e_ij)) with a
  learnable eps per layer.  ``gine_epsilon_mode="paper-printed"`` switches to
  the multiplicative variant MLP((1 - eps) · x_i ⊙ sum_j relu(x_j + e_ij)).
* ``mpnnpp``: updates edge, node, and global streams with concatenation
  MLPs and per-stream skip connections; the global update is projected back
  to d_global by its MLP so the skip shapes agree.

Graphs are batched as disjoint unions: node/edge rows concatenated, edge
indices offset, explicit per-node and per-edge graph ids.  Every undirected
bond contributes two directed edges.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Parameter, ShapeMismatch, Tape, load_checkpoint, save_checkpoint
from .encodings import (
    ATOM_FEATURE_WIDTH,
    BOND_FEATURE_WIDTH,
    DEFAULT_K_PE,
    DEFAULT_RW_STEPS,
    AssembledFeatures,
)
from .molgraph import MolecularGraph
from .seeding import rng_stream

BACKBONES = ("gcn", "gine", "mpnnpp")
POOL_METHODS = ("sum", "mean", "max")

#: Hidden widths (d_node, d_edge, d_global) putting each 16-layer stack near
#: 10M parameters; exact counts are pinned in the tests.
DEFAULT_WIDTHS = {
    "gcn": (704, 704, 704),
    "gine": (528, 528, 528),
    "mpnnpp": (256, 96, 256),
}


@dataclass
class ModelConfig:
    backbone: str = "gine"
    num_layers: int = 16
    d_node: int = 528
    d_edge: int = 528
    d_global: int = 528
    k_pe: int = DEFAULT_K_PE
    rw_steps: int = DEFAULT_RW_STEPS
    dropout: float = 0.0
    seed: int = 0
    gine_epsilon_mode: str = "standard"
    graph_head_input: str = "pooled"
    pool: str = "max"
    dtype: str = "float32"

    @property
    def node_input_width(self) -> int:
        return ATOM_FEATURE_WIDTH + 2 * self.k_pe + self.rw_steps

    @property
    def edge_input_width(self) -> int:
        return BOND_FEATURE_WIDTH

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if min(self.d_node, self.d_edge, self.d_global) < 1:
            raise ValueError("hidden widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.backbone == "gine" and self.d_node != self.d_edge:
            raise ValueError("gine requires d_node == d_edge (x_j + e_ij)")
        if self.gine_epsilon_mode not in ("standard", "paper-printed"):
            raise ValueError(f"unknown gine_epsilon_mode {self.gine_epsilon_mode!r}")
        if self.graph_head_input not in ("pooled", "global"):
            raise ValueError(f"unknown graph_head_input {self.graph_head_input!r}")
        if self.pool not in POOL_METHODS:
            raise ValueError(f"unknown pool method {self.pool!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")


def default_config(backbone: str, **overrides) -> ModelConfig:
    """Config with the standard widths for one backbone."""
    if backbone not in DEFAULT_WIDTHS:
        raise ValueError(f"unknown backbone {backbone!r}")
    d_node, d_edge, d_global = DEFAULT_WIDTHS[backbone]
    head_input = "global" if backbone == "mpnnpp" else "pooled"
    cfg = ModelConfig(
        backbone=backbone,
        d_node=d_node,
        d_edge=d_edge,
        d_global=d_global,
        graph_head_input=head_input,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@dataclass
class HeadSpec:
    """Shape record for one task head, kept in the checkpoint sidecar."""

    name: str
    level: str  # "node" | "graph"
    in_dim: int
    hidden_dim: int
    out_dim: int


class ModelState:
    """Embedding MLPs, layer-stack parameters, global seed vector, task heads."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.heads: dict[str, HeadSpec] = {}
        self._init_rng = rng_stream(config.seed, "params")
        self.global_seed = (
            rng_stream(config.seed, "global-node")
            .standard_normal(config.d_global)
            .astype(config.np_dtype)
        )

    # -- parameter management ------------------------------------------------

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param = Parameter(name, np.asarray(value, dtype=self.config.np_dtype))
        self.params[name] = param
        return param

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        value = self._init_rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return self.add_parameter(name, value)

    def add_mlp(self, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
        self.glorot(f"{prefix}/w1", d_in, d_hidden)
        self.add_parameter(f"{prefix}/b1", np.zeros(d_hidden))
        self.glorot(f"{prefix}/w2", d_hidden, d_out)
        self.add_parameter(f"{prefix}/b2", np.zeros(d_out))

    def add_task_head(self, name: str, level: str, in_dim: int, out_dim: int, hidden_dim: int | None = None) -> HeadSpec:
        hidden = hidden_dim if hidden_dim is not None else in_dim
        spec = HeadSpec(name=name, level=level, in_dim=in_dim, hidden_dim=hidden, out_dim=out_dim)
        self.heads[name] = spec
        self.add_mlp(f"head/{name}", in_dim, hidden, out_dim)
        return spec

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> float:
        """Cheap mutation detector over all parameter values."""
        return float(sum(np.abs(p.value).sum() for p in self.params.values()))


def count_parameters(state: ModelState) -> int:
    return sum(p.value.size for p in state.params.values())


def build_model(config: ModelConfig) -> ModelState:
    """Create a fresh model: embedding MLPs plus the per-layer parameters."""
    state = ModelState(config)
    state.add_mlp("embed_x", config.node_input_width, config.d_node, config.d_node)
    state.add_mlp("embed_e", config.edge_input_width, config.d_edge, config.d_edge)
    state.add_mlp("embed_g", config.d_global, config.d_global, config.d_global)
    for layer in range(config.num_layers):
        if config.backbone == "gcn":
            state.glorot(f"layer{layer}/w", config.d_node, config.d_node)
            state.add_parameter(f"layer{layer}/b", np.zeros(config.d_node))
        elif config.backbone == "gine":
            state.add_mlp(f"layer{layer}/mlp", config.d_node, config.d_node, config.d_node)
            state.add_parameter(f"layer{layer}/epsilon", np.zeros(1))
        else:
            d_n, d_e, d_g = config.d_node, config.d_edge, config.d_global
            state.add_mlp(f"layer{layer}/mlp_edge", 2 * d_n + d_e + d_g, d_e, d_e)
            state.add_mlp(f"layer{layer}/mlp_node", 2 * d_n + 2 * d_e + d_g, d_n, d_n)
            state.add_mlp(f"layer{layer}/mlp_global", d_g + d_n + d_e, d_g, d_g)
    return state


# -- batching -----------------------------------------------------------------


@dataclass
class GraphBatch:
    """Disjoint union of graphs; every bond appears as two directed edges."""

    node_features: np.ndarray
    edge_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_graph_ids: np.ndarray
    edge_graph_ids: np.ndarray
    num_graphs: int
    node_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.senders.shape[0]

    def validate(self) -> None:
        n = self.num_nodes
        if self.num_edges and (self.senders.max() >= n or self.receivers.max() >= n):
            raise ShapeMismatch("edge index out of range")
        ids = np.unique(self.node_graph_ids)
        if not np.array_equal(ids, np.arange(self.num_graphs)):
            raise ShapeMismatch("graph ids must be contiguous from 0")


def batch_graphs(
    graphs: list[MolecularGraph],
    features: list[AssembledFeatures],
    dtype=np.float32,
) -> GraphBatch:
    node_rows, edge_rows = [], []
    senders, receivers = [], []
    node_ids, edge_ids = [], []
    counts = []
    offset = 0
    for gid, (graph, feats) in enumerate(zip(graphs, features)):
        n = graph.num_atoms
        node_rows.append(np.asarray(feats.node_features, dtype=dtype))
        counts.append(n)
        node_ids.append(np.full(n, gid, dtype=np.int64))
        e = np.asarray(feats.edge_features, dtype=dtype)
        for k, bond in enumerate(graph.bonds):
            senders.extend((bond.u + offset, bond.v + offset))
            receivers.extend((bond.v + offset, bond.u + offset))
            edge_rows.append(e[k])
            edge_rows.append(e[k])
            edge_ids.extend((gid, gid))
        offset += n
    edge_width = features[0].edge_features.shape[1] if features else 0
    batch = GraphBatch(
        node_features=np.concatenate(node_rows, axis=0) if node_rows else np.zeros((0, 0), dtype=dtype),
        edge_features=np.asarray(edge_rows, dtype=dtype).reshape(len(edge_rows), edge_width),
        senders=np.asarray(senders, dtype=np.int64),
        receivers=np.asarray(receivers, dtype=np.int64),
        node_graph_ids=np.concatenate(node_ids) if node_ids else np.zeros(0, dtype=np.int64),
        edge_graph_ids=np.asarray(edge_ids, dtype=np.int64),
        num_graphs=len(graphs),
        node_counts=np.asarray(counts, dtype=np.int64),
    )
    batch.validate()
    return batch


# -- forward pass ---------------------------------------------------------------


def mlp_forward(tape: Tape, state: ModelState, prefix: str, x):
    h = tape.linear(x, tape.watch(state.params[f"{prefix}/w1"]), tape.watch(state.params[f"{prefix}/b1"]))
    h = tape.relu(h)
    return tape.linear(h, tape.watch(state.params[f"{prefix}/w2"]), tape.watch(state.params[f"{prefix}/b2"]))


def embed_inputs(tape: Tape, batch: GraphBatch, state: ModelState):
    """(x0, e0, g0): two-layer MLPs over X0, E0, and the per-model seed vector."""
    cfg = state.config
    if batch.node_features.shape[1] != cfg.node_input_width:
        raise ShapeMismatch(
            f"node features width {batch.node_features.shape[1]} != expected {cfg.node_input_width}"
        )
    x0 = mlp_forward(tape, state, "embed_x", tape.constant(batch.node_features))
    e0 = mlp_forward(tape, state, "embed_e", tape.constant(batch.edge_features))
    seed_row = tape.constant(state.global_seed.reshape(1, -1))
    g_row = mlp_forward(tape, state, "embed_g", seed_row)
    g0 = tape.gather(g_row, np.zeros(batch.num_graphs, dtype=np.int64))
    return x0, e0, g0


def gcn_aggregate(tape: Tape, x, senders, receivers, num_nodes):
    """The weight-free normalized aggregation sum_{j in N(i) ∪ {i}} x_j / sqrt(d_i d_j)."""
    dtype = x.data.dtype
    degrees = (np.bincount(receivers, minlength=num_nodes) + 1.0).astype(dtype)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    edge_coeff = (inv_sqrt[senders] * inv_sqrt[receivers])[:, None]
    messages = tape.mul(tape.gather(x, senders), tape.constant(edge_coeff))
    aggregated = tape.segment_sum(messages, receivers, num_nodes)
    self_term = tape.mul(x, tape.constant((1.0 / degrees)[:, None]))
    return tape.add(aggregated, self_term)


def gcn_layer(tape: Tape, state: ModelState, layer: int, x, batch: GraphBatch, training: bool, step: int):
    agg = gcn_aggregate(tape, x, batch.senders, batch.receivers, batch.num_nodes)
    out = tape.linear(agg, tape.watch(state.params[f"layer{layer}/w"]), tape.watch(state.params[f"layer{layer}/b"]))
    out = tape.relu(out)
    return tape.dropout(out, state.config.dropout, (state.config.seed, layer, step), training)


def gine_layer(tape: Tape, state: ModelState, layer: int, x, e, batch: GraphBatch, training: bool, step: int):
    if x.data.shape[1] != e.data.shape[1]:
        raise ShapeMismatch(f"gine needs d_node == d_edge, got {x.data.shape} vs {e.data.shape}")
    messages = tape.relu(tape.add(tape.gather(x, batch.senders), e))
    agg = tape.segment_sum(messages, batch.receivers, batch.num_nodes)
    eps = tape.watch(state.params[f"layer{layer}/epsilon"])
    if state.config.gine_epsilon_mode == "standard":
        pre = tape.add(tape.add(x, tape.mul(x, eps)), agg)  # (1 + eps) x + agg
    else:
        one_minus = tape.sub(tape.constant(np.ones(1, dtype=x.data.dtype)), eps)
        pre = tape.mul(tape.mul(x, one_minus), agg)  # (1 - eps) x ⊙ agg, as printed
    out = mlp_forward(tape, state, f"layer{layer}/mlp", pre)
    return tape.dropout(out, state.config.dropout, (state.config.seed, layer, step), training)


def mpnnpp_layer(tape: Tape, state: ModelState, layer: int, x, e, g, batch: GraphBatch, training: bool, step: int):
    n, num_graphs = batch.num_nodes, batch.num_graphs
    g_per_edge = tape.gather(g, batch.edge_graph_ids)
    g_per_node = tape.gather(g, batch.node_graph_ids)

    edge_in = tape.concat([tape.gather(x, batch.senders), tape.gather(x, batch.receivers), e, g_per_edge], axis=1)
    e_bar = mlp_forward(tape, state, f"layer{layer}/mlp_edge", edge_in)

    incoming_e = tape.segment_sum(e_bar, batch.receivers, n)
    outgoing_e = tape.segment_sum(e_bar, batch.senders, n)
    incoming_x = tape.segment_sum(tape.gather(x, batch.senders), batch.receivers, n)
    node_in = tape.concat([x, incoming_e, outgoing_e, incoming_x, g_per_node], axis=1)
    x_bar = mlp_forward(tape, state, f"layer{layer}/mlp_node", node_in)

    global_in = tape.concat(
        [g, tape.segment_sum(x_bar, batch.node_graph_ids, num_graphs), tape.segment_sum(e_bar, batch.edge_graph_ids, num_graphs)],
        axis=1,
    )
    g_bar = mlp_forward(tape, state, f"layer{layer}/mlp_global", global_in)

    x_out = tape.add(x_bar, x)
    e_out = tape.add(e_bar, e)
    g_out = tape.add(g_bar, g)
    rate, seed = state.config.dropout, state.config.seed
    x_out = tape.dropout(x_out, rate, (seed, layer * 4 + 1, step), training)
    e_out = tape.dropout(e_out, rate, (seed, layer * 4 + 2, step), training)
    g_out = tape.dropout(g_out, rate, (seed, layer * 4 + 3, step), training)
    return x_out, e_out, g_out


@dataclass
class ForwardResult:
    x: object  # Tensor: final node embeddings
    e: object  # Tensor: final edge embeddings (input embeddings for gcn/gine)
    g: object  # Tensor: final per-graph global embeddings


def forward(tape: Tape, batch: GraphBatch, state: ModelState, training: bool = False, step: int = 0) -> ForwardResult:
    """Embed then apply num_layers layer updates.

    gcn threads only x; gine threads x with read-only edge embeddings;
    mpnnpp threads node, edge, and global streams.
    """
    x, e, g = embed_inputs(tape, batch, state)
    cfg = state.config
    for layer in range(cfg.num_layers):
        if cfg.backbone == "gcn":
            x = gcn_layer(tape, state, layer, x, batch, training, step)
        elif cfg.backbone == "gine":
            x = gine_layer(tape, state, layer, x, e, batch, training, step)
        else:
            x, e, g = mpnnpp_layer(tape, state, layer, x, e, g, batch, training, step)
    return ForwardResult(x=x, e=e, g=g)


# -- persistence ----------------------------------------------------------------


def save_model(state: ModelState, path) -> None:
    """Checkpoint plus a sidecar config/head record for reload validation."""
    save_checkpoint(path, state.parameters())
    sidecar = {
        "config": asdict(state.config),
        "heads": [asdict(h) for h in state.heads.values()],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> ModelState:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    config = ModelConfig(**sidecar["config"])
    state = ModelState(config)
    arrays = load_checkpoint(path)
    for name, value in arrays.items():
        state.add_parameter(name, value.astype(config.np_dtype))
    for head in sidecar["heads"]:
        state.heads[head["name"]] = HeadSpec(**head)
    return state
