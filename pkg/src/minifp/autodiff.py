"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly what MLPs, message passing, pooling, and the losses need:
a :class:`Tape` records forward ops in execution order and replays them in
reverse to accumulate gradients into :class:`Parameter` objects.  Tensors
are dense numpy arrays: 32-bit by default, 64-bit during gradient checks.

Segment reductions accumulate in a canonical (sorted) order, so summing a
permuted set of rows produces a bitwise-identical result; this is what makes
fingerprints exactly invariant under node relabeling.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .seeding import rng_stream


class ShapeMismatch(ValueError):
    pass


class DisconnectedGraph(RuntimeError):
    """Raised when a loss does not depend on any watched parameter."""


class Tensor:
    """Array value tracked on a tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Named trainable array; gradients accumulate additively across backward calls."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class BatchNormState:
    """Running statistics for batch_norm, updated in training mode."""

    def __init__(self, width: int, dtype=np.float32):
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _canonical_order(values: np.ndarray, segment_ids: np.ndarray | None = None) -> np.ndarray:
    """Row order that is invariant to input permutation (segment, then row lex)."""
    keys = tuple(values[:, c] for c in range(values.shape[1] - 1, -1, -1))
    if segment_ids is not None:
        keys = keys + (segment_ids,)
    return np.lexsort(keys)


def canonical_column_sums(values: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array, accumulated in canonical row order.

    The result is bitwise identical for any row permutation of ``values``.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatch(f"expected 2-D array, got shape {values.shape}")
    if values.shape[0] == 0:
        return np.zeros(values.shape[1], dtype=values.dtype)
    return np.add.reduce(values[_canonical_order(values)], axis=0)


def segment_sum_forward(
    values: np.ndarray, segment_ids: np.ndarray, num_segments: int
) -> np.ndarray:
    """Per-segment column sums in canonical order; empty segments are zero."""
    values = np.asarray(values)
    segment_ids = np.asarray(segment_ids)
    if values.ndim != 2:
        raise ShapeMismatch(f"segment_sum expects 2-D values, got shape {values.shape}")
    if segment_ids.shape != (values.shape[0],):
        raise ShapeMismatch(
            f"segment ids shape {segment_ids.shape} does not match rows {values.shape[0]}"
        )
    out = np.zeros((num_segments, values.shape[1]), dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    order = _canonical_order(values, segment_ids)
    sorted_vals = values[order]
    sorted_ids = segment_ids[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_ids)) + 1))
    sums = np.add.reduceat(sorted_vals, starts, axis=0)
    out[sorted_ids[starts]] = sums
    return out


class Tape:
    """Single-writer record of forward operations, replayed in exact reverse order."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._tensors: list[Tensor] = []
        self._watched: dict[int, tuple[Parameter, Tensor]] = {}

    # -- tensor creation ---------------------------------------------------

    def constant(self, data) -> Tensor:
        t = Tensor(np.asarray(data))
        self._tensors.append(t)
        return t

    def watch(self, param: Parameter) -> Tensor:
        """Tensor view of a parameter; backward() accumulates into param.grad."""
        key = id(param)
        if key not in self._watched:
            t = Tensor(param.value, requires_grad=self.recording)
            self._watched[key] = (param, t)
            self._tensors.append(t)
        return self._watched[key][1]

    def _emit(self, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(data, requires_grad=self.recording and any(t.requires_grad for t in inputs))
        self._tensors.append(out)
        if out.requires_grad:
            self._ops.append((out, backward))
        return out

    @staticmethod
    def _accum(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g

    # -- forward ops ---------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeMismatch(f"matmul of {a.data.shape} and {b.data.shape}")
        out_data = a.data @ b.data

        def backward(g):
            self._accum(a, g @ b.data.T)
            self._accum(b, a.data.T @ g)

        return self._emit(out_data, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out_data = a.data + b.data
        except ValueError:
            raise ShapeMismatch(f"add of {a.data.shape} and {b.data.shape}") from None

        def backward(g):
            self._accum(a, _unbroadcast(g, a.data.shape))
            self._accum(b, _unbroadcast(g, b.data.shape))

        return self._emit(out_data, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out_data = a.data - b.data
        except ValueError:
            raise ShapeMismatch(f"sub of {a.data.shape} and {b.data.shape}") from None

        def backward(g):
            self._accum(a, _unbroadcast(g, a.data.shape))
            self._accum(b, _unbroadcast(-g, b.data.shape))

        return self._emit(out_data, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out_data = a.data * b.data
        except ValueError:
            raise ShapeMismatch(f"mul of {a.data.shape} and {b.data.shape}") from None

        def backward(g):
            self._accum(a, _unbroadcast(g * b.data, a.data.shape))
            self._accum(b, _unbroadcast(g * a.data, b.data.shape))

        return self._emit(out_data, (a, b), backward)

    def scale(self, a: Tensor, c: float) -> Tensor:
        out_data = a.data * c

        def backward(g):
            self._accum(a, g * c)

        return self._emit(out_data, (a,), backward)

    def concat(self, tensors: Sequence[Tensor], axis: int) -> Tensor:
        arrays = [t.data for t in tensors]
        out_data = np.concatenate(arrays, axis=axis)
        widths = [arr.shape[axis] for arr in arrays]
        offsets = np.cumsum([0] + widths)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                self._accum(t, g[tuple(idx)])

        return self._emit(out_data, tuple(tensors), backward)

    def relu(self, a: Tensor) -> Tensor:
        out_data = np.maximum(a.data, 0)

        def backward(g):
            self._accum(a, g * (a.data > 0))

        return self._emit(out_data, (a,), backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        # exp(-|x|) never overflows; both branches reduce to 1/(1+e^-x).
        e = np.exp(-np.abs(x))
        out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

        def backward(g):
            self._accum(a, g * out_data * (1.0 - out_data))

        return self._emit(out_data, (a,), backward)

    def absolute(self, a: Tensor) -> Tensor:
        out_data = np.abs(a.data)

        def backward(g):
            self._accum(a, g * np.sign(a.data))

        return self._emit(out_data, (a,), backward)

    def dropout(self, a: Tensor, rate: float, key: tuple[int, ...], training: bool = True) -> Tensor:
        """Inverted dropout with a counter-based mask keyed by (seed, op instance, step)."""
        if not training or rate == 0.0:
            return a
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        rng = rng_stream(key[0], "dropout", *key[1:])
        mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
        mask = mask.astype(a.data.dtype)
        out_data = a.data * mask

        def backward(g):
            self._accum(a, g * mask)

        return self._emit(out_data, (a,), backward)

    def layer_norm(self, a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        x = a.data
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered**2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out_data = gamma.data * xhat + beta.data
        width = x.shape[-1]

        def backward(g):
            dxhat = g * gamma.data
            dvar = np.sum(dxhat * centered * -0.5 * inv_std**3, axis=-1, keepdims=True)
            dmu = np.sum(-dxhat * inv_std, axis=-1, keepdims=True) + dvar * np.mean(
                -2.0 * centered, axis=-1, keepdims=True
            )
            dx = dxhat * inv_std + dvar * 2.0 * centered / width + dmu / width
            self._accum(a, dx)
            reduce_axes = tuple(range(g.ndim - 1))
            self._accum(gamma, (g * xhat).sum(axis=reduce_axes))
            self._accum(beta, g.sum(axis=reduce_axes))

        return self._emit(out_data, (a, gamma, beta), backward)

    def batch_norm(
        self,
        a: Tensor,
        gamma: Tensor,
        beta: Tensor,
        state: BatchNormState,
        training: bool,
        momentum: float = 0.9,
        eps: float = 1e-5,
    ) -> Tensor:
        x = a.data
        if training:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mu
            state.running_var[...] = momentum * state.running_var + (1 - momentum) * var
        else:
            mu = state.running_mean
            var = state.running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        out_data = gamma.data * xhat + beta.data
        rows = x.shape[0]

        def backward(g):
            if training:
                dxhat = g * gamma.data
                dx = (
                    inv_std
                    / rows
                    * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                )
            else:
                dx = g * gamma.data * inv_std
            self._accum(a, dx)
            self._accum(gamma, (g * xhat).sum(axis=0))
            self._accum(beta, g.sum(axis=0))

        return self._emit(out_data, (a, gamma, beta), backward)

    def gather(self, a: Tensor, rows: np.ndarray) -> Tensor:
        rows = np.asarray(rows)
        out_data = a.data[rows]

        def backward(g):
            if a.requires_grad:
                dz = np.zeros_like(a.data)
                np.add.at(dz, rows, g)
                self._accum(a, dz)

        return self._emit(out_data, (a,), backward)

    def index_select(self, a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
        indices = np.asarray(indices)
        out_data = np.take(a.data, indices, axis=axis)

        def backward(g):
            if a.requires_grad:
                dz = np.zeros_like(a.data)
                idx = [slice(None)] * a.data.ndim
                idx[axis] = indices
                np.add.at(dz, tuple(idx), g)
                self._accum(a, dz)

        return self._emit(out_data, (a,), backward)

    def segment_sum(self, values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
        segment_ids = np.asarray(segment_ids)
        out_data = segment_sum_forward(values.data, segment_ids, num_segments)

        def backward(g):
            self._accum(values, g[segment_ids])

        return self._emit(out_data, (values,), backward)

    def segment_mean(self, values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
        segment_ids = np.asarray(segment_ids)
        counts = np.bincount(segment_ids, minlength=num_segments).astype(values.data.dtype)
        safe = np.maximum(counts, 1.0)
        out_data = segment_sum_forward(values.data, segment_ids, num_segments) / safe[:, None]

        def backward(g):
            self._accum(values, (g / safe[:, None])[segment_ids])

        return self._emit(out_data, (values,), backward)

    def segment_max(self, values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
        segment_ids = np.asarray(segment_ids)
        if values.data.ndim != 2:
            raise ShapeMismatch(f"segment_max expects 2-D values, got {values.data.shape}")
        out_data = np.zeros((num_segments, values.data.shape[1]), dtype=values.data.dtype)
        argmax = np.full((num_segments, values.data.shape[1]), -1, dtype=np.int64)
        for seg in range(num_segments):
            rows = np.flatnonzero(segment_ids == seg)
            if rows.size == 0:
                continue
            block = values.data[rows]
            local = block.argmax(axis=0)
            out_data[seg] = block[local, np.arange(block.shape[1])]
            argmax[seg] = rows[local]

        def backward(g):
            if values.requires_grad:
                dz = np.zeros_like(values.data)
                mask = argmax >= 0
                np.add.at(
                    dz,
                    (argmax[mask], np.nonzero(mask)[1]),
                    g[mask],
                )
                self._accum(values, dz)

        return self._emit(out_data, (values,), backward)

    def sum(self, a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(a, np.broadcast_to(g, a.data.shape))

        return self._emit(out_data, (a,), backward)

    def mean(self, a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
        count = a.data.size if axis is None else a.data.shape[axis]
        out_data = a.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(a, np.broadcast_to(g, a.data.shape) / count)

        return self._emit(out_data, (a,), backward)

    def max(self, a: Tensor, axis: int) -> Tensor:
        out_data = a.data.max(axis=axis)
        arg = a.data.argmax(axis=axis)

        def backward(g):
            if a.requires_grad:
                dz = np.zeros_like(a.data)
                grid = np.indices(out_data.shape)
                idx = list(grid)
                idx.insert(axis, arg)
                dz[tuple(idx)] = g
                self._accum(a, dz)

        return self._emit(out_data, (a,), backward)

    def custom(
        self,
        out_data: np.ndarray,
        inputs: Sequence[Tensor],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> Tensor:
        """Extension hook: ``backward(g)`` returns one gradient per input (or None)."""

        def run(g):
            grads = backward(g)
            for t, gt in zip(inputs, grads):
                if gt is not None:
                    self._accum(t, gt)

        return self._emit(np.asarray(out_data), tuple(inputs), run)

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
        out = self.matmul(x, weight)
        if bias is not None:
            out = self.add(out, bias)
        return out

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every watched parameter's grad."""
        if loss.data.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise DisconnectedGraph("loss does not depend on any watched parameter")
        for t in self._tensors:
            t.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._ops):
            if out.grad is not None:
                backward_fn(out.grad)
        for param, t in self._watched.values():
            if t.grad is not None:
                param.grad += t.grad


def finite_difference_check(
    fn: Callable[[Tape], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be deterministic (dropout off) and is re-evaluated twice per
    parameter coordinate.  Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(fn(tape))
    analytic = {p.name: p.grad.copy() for p in params}

    max_rel = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        grad_flat = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(Tape(recording=False)).data)
            flat[i] = orig - h
            down = float(fn(Tape(recording=False)).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(grad_flat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(grad_flat[i] - numeric) / denom)
    return max_rel


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter]) -> None:
    """Binary checkpoint: version, count, then (name, shape, float32 LE) records."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name_bytes = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


class CorruptCheckpoint(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> float32 array (bit-exact round trip)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise CorruptCheckpoint("truncated header")
        version, count = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw = fh.read(2)
            if len(raw) != 2:
                raise CorruptCheckpoint("truncated record")
            (name_len,) = struct.unpack("<H", raw)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            buf = fh.read(4 * n_items)
            if len(buf) != 4 * n_items:
                raise CorruptCheckpoint(f"truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        return out
