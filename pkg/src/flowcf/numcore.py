"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: just enough machinery to train the next-activity
predictor and to differentiate counterfactual-search losses with respect
to relaxed categorical inputs. Everything is float64; there is no
broadcasting beyond bias-style row addition, and shapes are checked
eagerly so bugs surface at the op that caused them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeMismatch(ValueError):
    """Operands do not have compatible shapes for the requested op."""


class IndexOutOfBounds(IndexError):
    """Lookup indices fall outside the embedding table."""


class NonScalarLoss(ValueError):
    """backward() requires a size-1 loss tensor."""


class MissingGradient(ValueError):
    """adam_step() found a parameter whose gradient was never populated."""


_node_counter = itertools.count()


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


class Graph:
    """Execution-ordered tape of recorded operations.

    Ops append (output, pullback) pairs while recording; creation order is
    a topological order of the DAG, so backward() replays the tape in
    reverse and visits every node exactly once. A Graph is single-threaded;
    distinct graphs may run concurrently.
    """

    def __init__(self, recording: bool = True, seed: int | None = None):
        self.recording = recording
        self.rng = np.random.default_rng(seed)
        self._tape: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def _emit(self, out: Tensor, pullback: Callable[[np.ndarray], None]) -> Tensor:
        if self.recording and out.requires_grad:
            self._tape.append((out, pullback))
        return out

    def reset(self) -> None:
        self._tape.clear()

    def __len__(self) -> int:
        return len(self._tape)

    def backward(self, loss: Tensor) -> None:
        """Populate grad = d loss / d leaf for every reachable leaf, then reset."""
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.data.shape}")
        loss.accumulate(np.ones_like(loss.data))
        for out, pullback in reversed(self._tape):
            if out.grad is not None:
                pullback(out.grad)
        self.reset()

    # -- arithmetic ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
        out = Tensor(a.data @ b.data, _needs(a, b))

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)

        return self._emit(out, pullback)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; also accepts a (n,) bias against an (m, n) matrix."""
        bias = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
        if not bias and a.data.shape != b.data.shape:
            raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}")
        out = Tensor(a.data + b.data, _needs(a, b))

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0) if bias else g)

        return self._emit(out, pullback)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"sub {a.data.shape} - {b.data.shape}")
        out = Tensor(a.data - b.data, _needs(a, b))

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(-g)

        return self._emit(out, pullback)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"mul {a.data.shape} * {b.data.shape}")
        out = Tensor(a.data * b.data, _needs(a, b))

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return self._emit(out, pullback)

    def scale(self, a: Tensor, c: float) -> Tensor:
        out = Tensor(a.data * c, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * c)

        return self._emit(out, pullback)

    def add_const(self, a: Tensor, c: float) -> Tensor:
        out = Tensor(a.data + c, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g)

        return self._emit(out, pullback)

    # -- reductions ---------------------------------------------------

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        out = Tensor(a.data.sum(axis=axis), a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                if axis is None:
                    a.accumulate(np.full_like(a.data, float(g)))
                else:
                    a.accumulate(np.expand_dims(g, axis) * np.ones_like(a.data))

        return self._emit(out, pullback)

    def mean(self, a: Tensor) -> Tensor:
        n = a.data.size
        out = Tensor(a.data.mean(), a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(np.full_like(a.data, float(g) / n))

        return self._emit(out, pullback)

    def masked_mean(self, a: Tensor, mask: np.ndarray) -> Tensor:
        """Mean of the entries where mask is nonzero; mask is a constant."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.data.shape:
            raise ShapeMismatch(f"masked_mean mask {mask.shape} vs {a.data.shape}")
        total = mask.sum()
        if total <= 0:
            raise ShapeMismatch("masked_mean needs a non-empty mask")
        out = Tensor((a.data * mask).sum() / total, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(float(g) * mask / total)

        return self._emit(out, pullback)

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 1 or a.data.shape != b.data.shape:
            raise ShapeMismatch(f"dot {a.data.shape} . {b.data.shape}")
        out = Tensor(a.data @ b.data, _needs(a, b))

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(float(g) * b.data)
            if b.requires_grad:
                b.accumulate(float(g) * a.data)

        return self._emit(out, pullback)

    # -- structure ----------------------------------------------------

    def concat(self, parts: list[Tensor], axis: int) -> Tensor:
        if axis not in (0, 1):
            raise ShapeMismatch("concat supports axis 0 or 1")
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _needs(*parts))
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def pullback(g: np.ndarray) -> None:
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate(g[lo:hi] if axis == 0 else g[:, lo:hi])

        return self._emit(out, pullback)

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        out = Tensor(a.data[start:stop], a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[start:stop] = g
                a.accumulate(full)

        return self._emit(out, pullback)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeMismatch("slice_cols expects a matrix")
        out = Tensor(a.data[:, start:stop], a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[:, start:stop] = g
                a.accumulate(full)

        return self._emit(out, pullback)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = Tensor(a.data.reshape(shape), a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g.reshape(a.data.shape))

        return self._emit(out, pullback)

    # -- nonlinearities -------------------------------------------------

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 1.0 / (1.0 + np.exp(-a.data))
        out = Tensor(y, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * y * (1.0 - y))

        return self._emit(out, pullback)

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        out = Tensor(y, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * (1.0 - y * y))

        return self._emit(out, pullback)

    def abs(self, a: Tensor) -> Tensor:
        out = Tensor(np.abs(a.data), a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * np.sign(a.data))

        return self._emit(out, pullback)

    def reciprocal(self, a: Tensor) -> Tensor:
        y = 1.0 / a.data
        out = Tensor(y, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(-g * y * y)

        return self._emit(out, pullback)

    def sqrt(self, a: Tensor) -> Tensor:
        """Elementwise sqrt; the subgradient at 0 is taken as 0."""
        y = np.sqrt(np.maximum(a.data, 0.0))
        out = Tensor(y, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                safe = np.where(y > 1e-12, y, np.inf)
                a.accumulate(g * 0.5 / safe)

        return self._emit(out, pullback)

    def softmax(self, a: Tensor, axis: int = -1) -> Tensor:
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                inner = (g * y).sum(axis=axis, keepdims=True)
                a.accumulate(y * (g - inner))

        return self._emit(out, pullback)

    def det(self, a: Tensor) -> Tensor:
        """Determinant of a square matrix; gradient uses det(A) * inv(A)^T."""
        if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
            raise ShapeMismatch(f"det expects a square matrix, got {a.data.shape}")
        val = float(np.linalg.det(a.data))
        out = Tensor(val, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                try:
                    inv_t = np.linalg.inv(a.data).T
                except np.linalg.LinAlgError:
                    inv_t = np.linalg.pinv(a.data).T
                a.accumulate(float(g) * val * inv_t)

        return self._emit(out, pullback)

    # -- embedding / regularization -------------------------------------

    def embedding_lookup(self, table: Tensor, indices: np.ndarray) -> Tensor:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1:
            raise ShapeMismatch("embedding_lookup expects a 1-D index array")
        if indices.size and (indices.min() < 0 or indices.max() >= table.data.shape[0]):
            raise IndexOutOfBounds(f"indices outside table of {table.data.shape[0]} rows")
        out = Tensor(table.data[indices], table.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if table.requires_grad:
                full = np.zeros_like(table.data)
                np.add.at(full, indices, g)
                table.accumulate(full)

        return self._emit(out, pullback)

    def dropout(self, a: Tensor, rate: float, train: bool) -> Tensor:
        if not train or rate <= 0.0:
            return a
        keep = (self.rng.random(a.data.shape) >= rate) / (1.0 - rate)
        out = Tensor(a.data * keep, a.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate(g * keep)

        return self._emit(out, pullback)

    # -- losses ---------------------------------------------------------

    def cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean negative log-softmax of the label class.

        Accepts (N, C) logits with N labels, or a single (C,) row with a
        scalar label.
        """
        z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
        lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if lab.shape[0] != z.shape[0]:
            raise ShapeMismatch(f"{z.shape[0]} rows vs {lab.shape[0]} labels")
        if lab.min() < 0 or lab.max() >= z.shape[1]:
            raise IndexOutOfBounds("label outside logit range")
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        rows = np.arange(z.shape[0])
        out = Tensor((lse - z[rows, lab]).mean(), logits.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if logits.requires_grad:
                probs = np.exp(z - zmax)
                probs /= probs.sum(axis=1, keepdims=True)
                probs[rows, lab] -= 1.0
                logits.accumulate((float(g) / z.shape[0]) * probs.reshape(logits.data.shape))

        return self._emit(out, pullback)

    def hinge(self, logits: Tensor, desired: int, margin: float = 1.0) -> Tensor:
        """Multiclass margin loss: max(0, margin - (z_d - max_{j != d} z_j))."""
        z = logits.data.reshape(-1)
        if not 0 <= desired < z.size:
            raise IndexOutOfBounds(f"desired class {desired} outside {z.size} logits")
        masked = z.copy()
        masked[desired] = -np.inf
        rival = int(np.argmax(masked))
        val = max(0.0, margin - (z[desired] - z[rival]))
        out = Tensor(val, logits.requires_grad)

        def pullback(g: np.ndarray) -> None:
            if logits.requires_grad and val > 0.0:
                full = np.zeros_like(z)
                full[desired] -= float(g)
                full[rival] += float(g)
                logits.accumulate(full.reshape(logits.data.shape))

        return self._emit(out, pullback)


@dataclass
class AdamState:
    """Adam optimizer state: per-parameter moment buffers plus a step counter."""

    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        if p.grad is None:
            raise MissingGradient(f"parameter {p.node_id} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        m = state.first_moment.setdefault(p.node_id, np.zeros_like(p.data))
        v = state.second_moment.setdefault(p.node_id, np.zeros_like(p.data))
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
