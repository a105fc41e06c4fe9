"""Reverse-mode automatic differentiation over an append-only tape.

Values are dense float64 numpy arrays: 1-D vectors or 2-D matrices, always
C-contiguous (row-major). Primitives append exactly one node each; node ids
are plain ints and inputs always reference earlier nodes, so the tape is a
topologically ordered DAG and one reverse sweep implements the chain rule.

A mini-batch of sequences shares a single tape by carrying the batch along
the column axis: states are (n, B) matrices and per-sequence square
memories are stacked into a (B*n, n) block matrix. `bias_add`,
`block_outer`, `block_matvec` and `embed_cols` are the batch-aware
primitives; everything else is rank-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Array",
    "GradCheckReport",
    "GradientMap",
    "Node",
    "NonFiniteError",
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "TapeError",
    "check_finite",
    "grad_check",
]

PRIMITIVES = (
    "matmul",
    "matvec",
    "add",
    "bias_add",
    "hadamard",
    "scalar_scale",
    "outer_product",
    "block_outer",
    "block_matvec",
    "concat_rows",
    "slice_rows",
    "sigmoid",
    "relu",
    "layer_norm",
    "softmax_cross_entropy",
    "mean",
    "embed_cols",
)


class TapeError(RuntimeError):
    """Structural misuse of a tape (double backward, unknown primitive, ...)."""


class ShapeError(TapeError):
    """Operands do not conform to a primitive's arity or shape rules."""


class NonFiniteError(TapeError):
    """A tensor contains NaN or Inf where finite values are required."""


def check_finite(name: str, value: Array) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} contains non-finite values")


class Node:
    __slots__ = ("op", "inputs", "value", "saved")

    def __init__(self, op: str, inputs: tuple[int, ...], value: Array, saved=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.saved = saved

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node({self.op}, inputs={self.inputs}, shape={self.value.shape})"


class GradientMap:
    """Per-node gradients from one reverse sweep; zeros for untouched nodes."""

    def __init__(self, tape: "Tape"):
        self._tape = tape

    def __getitem__(self, nid: int) -> Array:
        g = self._tape._grads[nid]
        if g is None:
            return np.zeros_like(self._tape.value(nid))
        return g


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Append-only computation record supporting one reverse sweep.

    A tape is single-threaded. Node values are immutable once appended;
    sharing them read-only across threads is safe. Set ``check_values``
    to validate every node output for NaN/Inf as it is produced.
    """

    def __init__(self, check_values: bool = False):
        self.nodes: list[Node] = []
        self.check_values = check_values
        self.relu_kink_margin = math.inf  # min |preactivation| over all relu nodes
        self._grads: list[Array | None] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    # -- bookkeeping ---------------------------------------------------

    def _append(self, op: str, inputs: tuple[int, ...], value: Array, saved=None) -> int:
        if self._grads is not None:
            raise TapeError("tape already ran backward; build a new tape or reset_gradients()")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if self.check_values:
            check_finite(f"{op} output", value)
        self.nodes.append(Node(op, inputs, value, saved))
        return len(self.nodes) - 1

    def value(self, nid: int) -> Array:
        return self.nodes[nid].value

    def shape(self, nid: int) -> tuple[int, ...]:
        return self.nodes[nid].value.shape

    def saved(self, nid: int):
        return self.nodes[nid].saved

    def leaf(self, value) -> int:
        """Append an input/parameter node holding a private copy of `value`."""
        return self._append("leaf", (), np.array(value, dtype=np.float64))

    def apply(self, kind: str, inputs: Sequence[int], **attrs) -> int:
        """Append one primitive node; `kind` must be in PRIMITIVES."""
        if kind not in PRIMITIVES:
            raise TapeError(f"unknown primitive {kind!r}")
        return getattr(self, kind)(*inputs, **attrs)

    # -- primitives ----------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {va.shape} and {vb.shape}")
        return self._append("matmul", (a, b), va @ vb)

    def matvec(self, a: int, x: int) -> int:
        va, vx = self.value(a), self.value(x)
        if va.ndim != 2 or vx.ndim != 1 or va.shape[1] != vx.shape[0]:
            raise ShapeError(f"matvec: incompatible shapes {va.shape} and {vx.shape}")
        return self._append("matvec", (a, x), va @ vx)

    def add(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"add: shapes differ, {va.shape} vs {vb.shape}")
        return self._append("add", (a, b), va + vb)

    def bias_add(self, z: int, b: int) -> int:
        vz, vb = self.value(z), self.value(b)
        if vz.ndim != 2 or vb.ndim != 1 or vz.shape[0] != vb.shape[0]:
            raise ShapeError(f"bias_add: incompatible shapes {vz.shape} and {vb.shape}")
        return self._append("bias_add", (z, b), vz + vb[:, None])

    def hadamard(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"hadamard: shapes differ, {va.shape} vs {vb.shape}")
        return self._append("hadamard", (a, b), va * vb)

    def scalar_scale(self, a: int, scale: float) -> int:
        return self._append("scalar_scale", (a,), float(scale) * self.value(a), saved=float(scale))

    def outer_product(self, u: int, v: int) -> int:
        vu, vv = self.value(u), self.value(v)
        if vu.ndim != 1 or vv.ndim != 1:
            raise ShapeError(f"outer_product: expected two vectors, got {vu.shape} and {vv.shape}")
        return self._append("outer_product", (u, v), np.outer(vu, vv))

    def block_outer(self, u: int, v: int) -> int:
        """Per-column outer products, stacked: out[b*n:(b+1)*n, :] = u[:,b] v[:,b]^T."""
        vu, vv = self.value(u), self.value(v)
        if vu.ndim != 2 or vv.ndim != 2 or vu.shape[1] != vv.shape[1]:
            raise ShapeError(f"block_outer: incompatible shapes {vu.shape} and {vv.shape}")
        n, batch = vu.shape
        m = vv.shape[0]
        out = np.einsum("ib,jb->bij", vu, vv).reshape(batch * n, m)
        return self._append("block_outer", (u, v), out)

    def block_matvec(self, a: int, v: int) -> int:
        """Per-column matrix-vector products: out[:,b] = A_b @ v[:,b] for stacked A."""
        va, vv = self.value(a), self.value(v)
        if va.ndim != 2 or vv.ndim != 2 or va.shape[1] != vv.shape[0]:
            raise ShapeError(f"block_matvec: incompatible shapes {va.shape} and {vv.shape}")
        batch = vv.shape[1]
        if batch == 0 or va.shape[0] % batch != 0:
            raise ShapeError(
                f"block_matvec: {va.shape[0]} stacked rows do not split into {batch} blocks"
            )
        n = va.shape[0] // batch
        out = np.einsum("bij,jb->ib", va.reshape(batch, n, va.shape[1]), vv)
        return self._append("block_matvec", (a, v), out)

    def concat_rows(self, *xs: int) -> int:
        if not xs:
            raise ShapeError("concat_rows: needs at least one input")
        vals = [self.value(x) for x in xs]
        ndim = vals[0].ndim
        if any(v.ndim != ndim for v in vals):
            raise ShapeError(f"concat_rows: mixed ranks {[v.shape for v in vals]}")
        if ndim == 2 and any(v.shape[1] != vals[0].shape[1] for v in vals):
            raise ShapeError(f"concat_rows: column counts differ {[v.shape for v in vals]}")
        offsets = np.cumsum([0] + [v.shape[0] for v in vals])
        return self._append("concat_rows", tuple(xs), np.concatenate(vals, axis=0), saved=offsets)

    def slice_rows(self, x: int, start: int, stop: int) -> int:
        vx = self.value(x)
        if not (0 <= start < stop <= vx.shape[0]):
            raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {vx.shape}")
        return self._append("slice_rows", (x,), vx[start:stop].copy(), saved=(start, stop))

    def sigmoid(self, x: int) -> int:
        return self._append("sigmoid", (x,), _stable_sigmoid(self.value(x)))

    def relu(self, x: int) -> int:
        # subgradient at exactly 0 is 0: forward mask and backward mask are both (x > 0)
        vx = self.value(x)
        if vx.size:
            self.relu_kink_margin = min(self.relu_kink_margin, float(np.min(np.abs(vx))))
        return self._append("relu", (x,), np.maximum(vx, 0.0))

    def layer_norm(self, x: int, gain: int, bias: int, eps: float = 1e-5) -> int:
        """Standardize along axis 0 (per column for matrices), then gain/bias.

        Uses the population variance and adds `eps` inside the square root.
        """
        vx, vg, vb = self.value(x), self.value(gain), self.value(bias)
        n = vx.shape[0]
        if n < 2:
            raise ShapeError(f"layer_norm: needs at least 2 rows, got shape {vx.shape}")
        if vg.ndim != 1 or vb.ndim != 1 or vg.shape[0] != n or vb.shape[0] != n:
            raise ShapeError(
                f"layer_norm: gain/bias shapes {vg.shape}/{vb.shape} do not match input {vx.shape}"
            )
        if eps < 0:
            raise ShapeError(f"layer_norm: eps must be non-negative, got {eps}")
        centered = vx - vx.mean(axis=0)
        inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=0) + eps)
        norm = centered * inv_std
        out = norm * vg[:, None] + vb[:, None] if vx.ndim == 2 else norm * vg + vb
        return self._append("layer_norm", (x, gain, bias), out, saved=(norm, inv_std))

    def softmax_cross_entropy(self, z: int, target) -> int:
        """Cross-entropy of softmax(z) against an integer target.

        1-D logits take a single int target and yield a scalar; (V, B)
        logits take B targets and yield the per-column loss vector.
        """
        vz = self.value(z)
        shift = vz.max(axis=0)
        ez = np.exp(vz - shift)
        total = ez.sum(axis=0)
        probs = ez / total
        if vz.ndim == 1:
            t = int(target)
            if not 0 <= t < vz.shape[0]:
                raise ShapeError(f"softmax_cross_entropy: target {t} out of range for {vz.shape[0]} classes")
            loss = np.log(total) + shift - vz[t]
            return self._append("softmax_cross_entropy", (z,), loss, saved=(probs, t))
        targets = np.asarray(target, dtype=np.int64)
        if targets.shape != (vz.shape[1],):
            raise ShapeError(
                f"softmax_cross_entropy: expected {vz.shape[1]} targets, got shape {targets.shape}"
            )
        if targets.size and (targets.min() < 0 or targets.max() >= vz.shape[0]):
            raise ShapeError(f"softmax_cross_entropy: target out of range for {vz.shape[0]} classes")
        loss = np.log(total) + shift - vz[targets, np.arange(vz.shape[1])]
        return self._append("softmax_cross_entropy", (z,), loss, saved=(probs, targets))

    def mean(self, x: int) -> int:
        return self._append("mean", (x,), np.asarray(self.value(x).mean()))

    def embed_cols(self, table: int, ids) -> int:
        """Row lookup transposed to columns: out[:, b] = table[ids[b], :]."""
        vt = self.value(table)
        idx = np.asarray(ids, dtype=np.int64)
        if vt.ndim != 2 or idx.ndim != 1:
            raise ShapeError(f"embed_cols: expected matrix and id vector, got {vt.shape} and {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= vt.shape[0]):
            raise ShapeError(f"embed_cols: id out of range for table with {vt.shape[0]} rows")
        return self._append("embed_cols", (table,), vt[idx].T, saved=idx.copy())

    # -- reverse sweep ---------------------------------------------------

    def backward(self, loss: int) -> GradientMap:
        """Run one reverse sweep from `loss` and return the gradient map.

        The loss node must hold a single element; its own gradient is 1.
        """
        if self._grads is not None:
            raise TapeError("backward already ran on this tape; call reset_gradients() first")
        lv = self.value(loss)
        if lv.size != 1:
            raise TapeError(f"backward requires a scalar loss node, got shape {lv.shape}")
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(lv)
        self._grads = grads
        for nid in range(loss, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op != "leaf":
                self._backprop(node, g)
        return GradientMap(self)

    def reset_gradients(self) -> None:
        self._grads = None

    def _acc(self, nid: int, g: Array, own: bool = False) -> None:
        cur = self._grads[nid]
        if cur is None:
            self._grads[nid] = g if own else np.array(g, dtype=np.float64)
        else:
            cur += g

    def _backprop(self, node: Node, g: Array) -> None:
        op = node.op
        ins = node.inputs
        if op == "matmul":
            va, vb = self.value(ins[0]), self.value(ins[1])
            self._acc(ins[0], g @ vb.T, own=True)
            self._acc(ins[1], va.T @ g, own=True)
        elif op == "matvec":
            va, vx = self.value(ins[0]), self.value(ins[1])
            self._acc(ins[0], np.outer(g, vx), own=True)
            self._acc(ins[1], va.T @ g, own=True)
        elif op == "add":
            self._acc(ins[0], g)
            self._acc(ins[1], g)
        elif op == "bias_add":
            self._acc(ins[0], g)
            self._acc(ins[1], g.sum(axis=1), own=True)
        elif op == "hadamard":
            va, vb = self.value(ins[0]), self.value(ins[1])
            self._acc(ins[0], g * vb, own=True)
            self._acc(ins[1], g * va, own=True)
        elif op == "scalar_scale":
            self._acc(ins[0], node.saved * g, own=True)
        elif op == "outer_product":
            vu, vv = self.value(ins[0]), self.value(ins[1])
            self._acc(ins[0], g @ vv, own=True)
            self._acc(ins[1], g.T @ vu, own=True)
        elif op == "block_outer":
            vu, vv = self.value(ins[0]), self.value(ins[1])
            n, batch = vu.shape
            g3 = g.reshape(batch, n, vv.shape[0])
            self._acc(ins[0], np.einsum("bij,jb->ib", g3, vv), own=True)
            self._acc(ins[1], np.einsum("bij,ib->jb", g3, vu), own=True)
        elif op == "block_matvec":
            va, vv = self.value(ins[0]), self.value(ins[1])
            batch = vv.shape[1]
            n = va.shape[0] // batch
            a3 = va.reshape(batch, n, va.shape[1])
            self._acc(ins[0], np.einsum("ib,jb->bij", g, vv).reshape(va.shape), own=True)
            self._acc(ins[1], np.einsum("bij,ib->jb", a3, g), own=True)
        elif op == "concat_rows":
            offsets = node.saved
            for k, nid_in in enumerate(ins):
                self._acc(nid_in, g[offsets[k]:offsets[k + 1]])
        elif op == "slice_rows":
            start, stop = node.saved
            full = np.zeros_like(self.value(ins[0]))
            full[start:stop] = g
            self._acc(ins[0], full, own=True)
        elif op == "sigmoid":
            s = node.value
            self._acc(ins[0], g * s * (1.0 - s), own=True)
        elif op == "relu":
            vx = self.value(ins[0])
            self._acc(ins[0], g * (vx > 0.0), own=True)
        elif op == "layer_norm":
            norm, inv_std = node.saved
            vg = self.value(ins[1])
            if norm.ndim == 2:
                gy = g * vg[:, None]
                self._acc(ins[1], (g * norm).sum(axis=1), own=True)
                self._acc(ins[2], g.sum(axis=1), own=True)
            else:
                gy = g * vg
                self._acc(ins[1], g * norm, own=True)
                self._acc(ins[2], g)
            dx = (gy - gy.mean(axis=0) - norm * (gy * norm).mean(axis=0)) * inv_std
            self._acc(ins[0], dx, own=True)
        elif op == "softmax_cross_entropy":
            probs, target = node.saved
            if probs.ndim == 1:
                gz = probs * float(g)
                gz[target] -= float(g)
            else:
                gz = probs * g[None, :]
                gz[target, np.arange(probs.shape[1])] -= g
            self._acc(ins[0], gz, own=True)
        elif op == "mean":
            vx = self.value(ins[0])
            self._acc(ins[0], np.full_like(vx, float(g) / vx.size), own=True)
        elif op == "embed_cols":
            gt = np.zeros_like(self.value(ins[0]))
            np.add.at(gt, node.saved, g.T)
            self._acc(ins[0], gt, own=True)
        else:  # pragma: no cover
            raise TapeError(f"no backward rule for {op!r}")


# -- finite-difference verification ------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one gradient check."""

    max_rel_error: float
    param_errors: tuple[float, ...]
    resamples: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    build: Callable[["Tape", list[int]], int],
    params: Sequence[Array],
    *,
    step: float = 1e-5,
    tol: float = 1e-4,
    kink_margin: float = 1e-3,
    resample: Callable[[int], Sequence[Array]] | None = None,
    max_resamples: int = 100,
    denom_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `build(tape, leaf_ids)` must deterministically append a graph over leaf
    nodes created from `params` and return the id of a scalar loss node.
    Evaluation points where any ReLU preactivation lies within
    `kink_margin` of zero are rejected; `resample(attempt)` supplies a
    fresh parameter list for the retry. The relative error denominator is
    floored at `denom_floor` so true-zero gradients compare cleanly.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    resamples = 0
    while True:
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        loss = build(tape, leaves)
        if tape.relu_kink_margin > kink_margin:
            break
        resamples += 1
        if resample is None or resamples > max_resamples:
            raise TapeError(
                f"grad_check: evaluation point within {kink_margin} of a ReLU kink "
                f"after {resamples} draws; change the seed"
            )
        params = [np.array(p, dtype=np.float64) for p in resample(resamples)]
    grad_map = tape.backward(loss)
    analytic = [np.array(grad_map[leaf]) for leaf in leaves]

    def loss_at() -> float:
        t = Tape()
        return float(t.value(build(t, [t.leaf(p) for p in params])))

    errors = []
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        aflat = analytic[i].reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_at()
            flat[j] = orig - step
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(aflat[j]), abs(numeric), denom_floor)
            worst = max(worst, abs(aflat[j] - numeric) / denom)
        errors.append(worst)
    return GradCheckReport(max(errors, default=0.0), tuple(errors), resamples, tol)
