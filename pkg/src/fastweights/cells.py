"""Recurrent cells built on the tape engine.

Three cells share one state layout:

* ``fw_lstm`` - a gated cell whose candidate activation writes into, and is
  corrected by, a decaying outer-product fast-weight memory A.
* ``ln_lstm`` - the same gated cell with the fast-weight term removed.
* ``fw_rnn``  - a plain recurrent cell with the same fast-weight memory,
  refined by an inner fixed-point loop.

Step functions are pure given (params, cfg, state, input, tape) and accept
either a single sequence (1-D state, A is (h, h)) or a column batch of B
sequences (state (h, B), A stacked as (B*h, h)). Parameters must be bound
to the tape first via ``bind``; the returned object carries node ids in
place of arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fastweights.tape import Array, ShapeError, Tape, check_finite

__all__ = [
    "CELL_KINDS",
    "CellState",
    "FwConfig",
    "FwLstmParams",
    "FwRnnParams",
    "apply_cell",
    "bind",
    "fast_weight_update",
    "fwlstm_step",
    "fwrnn_step",
    "initialize",
    "lnlstm_step",
    "make_params",
    "named_arrays",
    "with_ids",
    "zero_state",
]

CELL_KINDS = ("fw_lstm", "ln_lstm", "fw_rnn")


@dataclass
class FwConfig:
    """Fast-weight constants and cell behaviour switches.

    ``eta`` is the write strength and ``lambda_`` the per-step decay of the
    memory matrix. ``inner_steps`` is the number of fixed-point refinements
    in the fw_rnn cell. ``joint_gate_layer_norm`` selects normalizing the
    full stacked gate preactivation at once (default) versus one gate block
    at a time.
    """

    eta: float = 1.0
    lambda_: float = 0.99
    inner_steps: int = 1
    fast_weights_enabled: bool = True
    joint_gate_layer_norm: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lambda_}")
        if self.eta < 0.0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be at least 1, got {self.inner_steps}")


@dataclass
class FwLstmParams:
    """Weights for the gated cells (shared by fw_lstm and ln_lstm).

    The gate preactivation stacks [input; forget; output; candidate] blocks,
    each W_v @ h + U_v @ x + b_v, normalized by ln_gate_gain/bias (4h). The
    cell update has its own ln_cell_gain/bias (h). After ``bind`` the fields
    hold tape node ids instead of arrays.
    """

    W_i: Array
    W_f: Array
    W_o: Array
    W_g: Array
    U_i: Array
    U_f: Array
    U_o: Array
    U_g: Array
    b_i: Array
    b_f: Array
    b_o: Array
    b_g: Array
    ln_gate_gain: Array
    ln_gate_bias: Array
    ln_cell_gain: Array
    ln_cell_bias: Array

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.U_i.shape[1]


@dataclass
class FwRnnParams:
    """Weights for the fw_rnn cell: h' from W @ h + C @ x + b under one
    layer norm, with the fast-weight correction applied inside the inner
    loop. After ``bind`` the fields hold tape node ids."""

    W: Array
    C: Array
    b: Array
    ln_gain: Array
    ln_bias: Array

    @property
    def hidden(self) -> int:
        return self.W.shape[0]

    @property
    def input_size(self) -> int:
        return self.C.shape[1]


@dataclass
class CellState:
    """Per-sequence recurrent state as tape node ids.

    ``c`` is None for fw_rnn; ``A`` is the fast-weight matrix, (h, h) for a
    single sequence or (B*h, h) block-stacked for a batch.
    """

    h: int
    c: Optional[int]
    A: Optional[int]


def named_arrays(params) -> dict[str, Array]:
    """Parameter arrays keyed by canonical field name, in field order."""
    return {f.name: getattr(params, f.name) for f in dataclasses.fields(params)}


def bind(params, tape: Tape):
    """Insert every parameter as a tape leaf; returns a same-shaped object
    whose fields are node ids, plus the name -> id mapping."""
    ids = {name: tape.leaf(value) for name, value in named_arrays(params).items()}
    return dataclasses.replace(params, **ids), ids


def with_ids(template, ids: list[int]):
    """Rebuild a params object from node ids listed in canonical field order."""
    names = [f.name for f in dataclasses.fields(template)]
    if len(names) != len(ids):
        raise ValueError(f"expected {len(names)} ids, got {len(ids)}")
    return dataclasses.replace(template, **dict(zip(names, ids)))


def make_params(kind: str, hidden: int, input_size: int, seed, forget_bias: float = 0.0):
    """Glorot-uniform weights (plus or minus sqrt(6/(fan_in+fan_out)) per
    matrix), zero biases, unit layer-norm gains. ``forget_bias`` offsets b_f
    for the gated cells; the default 0 relies on the gate normalization."""
    if hidden < 2:
        raise ValueError(f"hidden size must be at least 2 (layer norm is degenerate at 1), got {hidden}")
    if input_size < 1:
        raise ValueError(f"input size must be positive, got {input_size}")
    if kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {kind!r}; expected one of {CELL_KINDS}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def glorot(rows, cols):
        limit = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-limit, limit, size=(rows, cols))

    h, d = hidden, input_size
    if kind == "fw_rnn":
        return FwRnnParams(
            W=glorot(h, h),
            C=glorot(h, d),
            b=np.zeros(h),
            ln_gain=np.ones(h),
            ln_bias=np.zeros(h),
        )
    return FwLstmParams(
        W_i=glorot(h, h), W_f=glorot(h, h), W_o=glorot(h, h), W_g=glorot(h, h),
        U_i=glorot(h, d), U_f=glorot(h, d), U_o=glorot(h, d), U_g=glorot(h, d),
        b_i=np.zeros(h), b_f=np.zeros(h) + forget_bias, b_o=np.zeros(h), b_g=np.zeros(h),
        ln_gate_gain=np.ones(4 * h), ln_gate_bias=np.zeros(4 * h),
        ln_cell_gain=np.ones(h), ln_cell_bias=np.zeros(h),
    )


def zero_state(tape: Tape, kind: str, hidden: int, batch: Optional[int] = None) -> CellState:
    """All-zero starting state bound to `tape` (A starts as the zero matrix)."""
    vec_shape = (hidden,) if batch is None else (hidden, batch)
    mat_rows = hidden if batch is None else hidden * batch
    h = tape.leaf(np.zeros(vec_shape))
    c = None if kind == "fw_rnn" else tape.leaf(np.zeros(vec_shape))
    a = tape.leaf(np.zeros((mat_rows, hidden)))
    return CellState(h=h, c=c, A=a)


def initialize(kind: str, hidden: int, input_size: int, seed: int, tape: Tape):
    """Fresh parameters plus the zero state bound to `tape`; deterministic in seed."""
    params = make_params(kind, hidden, input_size, seed)
    return params, zero_state(tape, kind, hidden)


# -- step helpers -------------------------------------------------------


def _batched(tape: Tape, nid: int) -> bool:
    return tape.value(nid).ndim == 2


def _dot(tape: Tape, w: int, x: int) -> int:
    return tape.matmul(w, x) if _batched(tape, x) else tape.matvec(w, x)


def _with_bias(tape: Tape, z: int, b: int) -> int:
    return tape.bias_add(z, b) if _batched(tape, z) else tape.add(z, b)


def _check_state(tape: Tape, state: CellState, what: str) -> None:
    # A is not scanned here: a poisoned A contaminates h within one step.
    check_finite(f"{what} state.h", tape.value(state.h))
    if state.c is not None:
        check_finite(f"{what} state.c", tape.value(state.c))


def fast_weight_update(tape: Tape, A: int, key: int, eta: float, lambda_: float) -> int:
    """Decay-and-write memory update: A' = lambda * A + eta * key key^T.

    `key` may be a vector or an (h, B) column batch; A must match ((h, h)
    or stacked (B*h, h)). Starting from a zero matrix the update preserves
    exact symmetry of every block.
    """
    if _batched(tape, key):
        write = tape.block_outer(key, key)
    else:
        write = tape.outer_product(key, key)
    return tape.add(tape.scalar_scale(A, lambda_), tape.scalar_scale(write, eta))


def _query(tape: Tape, A: int, key: int) -> int:
    return tape.block_matvec(A, key) if _batched(tape, key) else tape.matvec(A, key)


def _gate_blocks(tape: Tape, p: FwLstmParams, h: int, x: int, joint_ln: bool):
    """Stacked gate preactivations -> (i_hat, f_hat, o_hat, g_hat), post-LN."""
    n = tape.shape(p.b_i)[0]
    w = tape.concat_rows(p.W_i, p.W_f, p.W_o, p.W_g)
    u = tape.concat_rows(p.U_i, p.U_f, p.U_o, p.U_g)
    b = tape.concat_rows(p.b_i, p.b_f, p.b_o, p.b_g)
    z = _with_bias(tape, tape.add(_dot(tape, w, h), _dot(tape, u, x)), b)
    if joint_ln:
        zn = tape.layer_norm(z, p.ln_gate_gain, p.ln_gate_bias)
        return tuple(tape.slice_rows(zn, v * n, (v + 1) * n) for v in range(4))
    blocks = []
    for v in range(4):
        zv = tape.slice_rows(z, v * n, (v + 1) * n)
        gv = tape.slice_rows(p.ln_gate_gain, v * n, (v + 1) * n)
        bv = tape.slice_rows(p.ln_gate_bias, v * n, (v + 1) * n)
        blocks.append(tape.layer_norm(zv, gv, bv))
    return tuple(blocks)


def _gated_step(p: FwLstmParams, state: CellState, x: int, tape: Tape,
                fast: Optional[FwConfig], joint_ln: bool):
    if state.c is None:
        raise ShapeError("gated cells need a cell state; got state.c = None")
    i_hat, f_hat, o_hat, g_hat = _gate_blocks(tape, p, state.h, x, joint_ln)
    i = tape.sigmoid(i_hat)
    f = tape.sigmoid(f_hat)
    o = tape.sigmoid(o_hat)
    g = tape.relu(g_hat)
    if fast is not None:
        A = fast_weight_update(tape, state.A, g, fast.eta, fast.lambda_)
        # the raw preactivation g_hat, not g, carries into the candidate
        candidate = tape.relu(tape.add(g_hat, _query(tape, A, g)))
    else:
        A = state.A
        candidate = tape.relu(g_hat)
    mix = tape.add(tape.hadamard(f, state.c), tape.hadamard(i, candidate))
    c = tape.layer_norm(mix, p.ln_cell_gain, p.ln_cell_bias)
    h = tape.hadamard(o, tape.relu(c))
    return CellState(h=h, c=c, A=A), h


def fwlstm_step(p: FwLstmParams, cfg: FwConfig, state: CellState, x: int, tape: Tape):
    """One step of the fast-weight gated cell; returns (new state, h node id).

    Order of operations: gate preactivations under layer norm, sigmoid
    gates with a ReLU candidate, memory decay-and-write keyed by the
    candidate, then the cell update mixes the raw candidate preactivation
    with the memory readout under a second ReLU and layer norm.
    """
    _check_state(tape, state, "fwlstm_step")
    fast = cfg if cfg.fast_weights_enabled else None
    return _gated_step(p, state, x, tape, fast, cfg.joint_gate_layer_norm)


def lnlstm_step(p: FwLstmParams, state: CellState, x: int, tape: Tape,
                joint_gate_layer_norm: bool = True):
    """One step of the gated cell with the fast-weight term removed.

    Bit-for-bit identical to ``fwlstm_step`` with eta = 0 and a zero A;
    the state's A node passes through untouched.
    """
    _check_state(tape, state, "lnlstm_step")
    return _gated_step(p, state, x, tape, None, joint_gate_layer_norm)


def fwrnn_step(p: FwRnnParams, cfg: FwConfig, state: CellState, x: int, tape: Tape):
    """One step of the fast-weight plain recurrent cell.

    z = W h + C x + b is fixed for the step; the memory is written with the
    previous hidden state, and the hidden state is refined ``inner_steps``
    times through h <- ReLU(LN[z + A h]).
    """
    _check_state(tape, state, "fwrnn_step")
    z = _with_bias(tape, tape.add(_dot(tape, p.W, state.h), _dot(tape, p.C, x)), p.b)
    if cfg.fast_weights_enabled:
        A = fast_weight_update(tape, state.A, state.h, cfg.eta, cfg.lambda_)
    else:
        A = state.A
    h = tape.relu(tape.layer_norm(z, p.ln_gain, p.ln_bias))
    for _ in range(cfg.inner_steps):
        refined = tape.add(z, _query(tape, A, h))
        h = tape.relu(tape.layer_norm(refined, p.ln_gain, p.ln_bias))
    return CellState(h=h, c=None, A=A), h


def apply_cell(kind: str, params, cfg: FwConfig, state: CellState, x: int, tape: Tape):
    """Dispatch one step of the named cell."""
    if kind == "fw_lstm":
        return fwlstm_step(params, cfg, state, x, tape)
    if kind == "ln_lstm":
        return lnlstm_step(params, state, x, tape, joint_gate_layer_norm=cfg.joint_gate_layer_norm)
    if kind == "fw_rnn":
        return fwrnn_step(params, cfg, state, x, tape)
    raise ValueError(f"unknown cell kind {kind!r}; expected one of {CELL_KINDS}")
