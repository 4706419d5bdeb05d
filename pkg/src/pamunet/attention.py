"""Attention gates for the decoder skip connections.

All four variants share one skeleton: the stage's upsampled decoder feature
``x`` is augmented with attended values and concatenated with the encoder
residual.  They differ in where queries/keys/values come from:

* progressive (PLA): the lower decoder feature is refined by an IR block and
  upsampled by the gate's own transposed conv, then split into key/value; the
  encoder residual is the query, unprojected.
* self: Q, K, V are all 1x1 projections of ``x``.
* cross: Q projects the encoder residual; K, V project ``x``.
* additive: like cross, but scores come from a single-hidden-layer scorer
  v . tanh(W1 q + W2 k) instead of the scaled dot product.

Attended values enter the stream as ``x + gain * attended`` with a learnable
scalar ``gain``.  With every gate parameter zeroed this makes a gate an exact
pass-through *and* an SGD fixed point (all gate gradients vanish), so a
zero-initialized attention model trains identically to the attention-free one.

Weight maps (softmax over the key axis) are materialized in full only when
both grids have at most ``MATERIALIZE_LIMIT`` positions; beyond that the
scaled-dot path switches to a chunked computation that recomputes weights in
backward and feeds the regularizer a streamed variance instead of the map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pamunet import tensor as T
from pamunet.blocks import ConvTranspose2d, IRBlock, Module, PointwiseConv
from pamunet.tensor import ShapeError, Tensor, accumulate_grad, record_op

MATERIALIZE_LIMIT = 4096  # max grid positions for storing a full attention map


# -- reference sequence attention -------------------------------------------

@dataclass
class LuongState:
    """One decoder step attending over encoder hidden states."""
    decoder_state: np.ndarray   # (d,)
    encoder_states: np.ndarray  # (T, d)


def luong_context(state: LuongState, score_kind: str = "dot"):
    """Context vector and weights for multiplicative (dot-score) attention."""
    if score_kind != "dot":
        raise ValueError(f"unsupported score kind: {score_kind!r}")
    h = np.asarray(state.encoder_states, dtype=np.float64)
    s = np.asarray(state.decoder_state, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError("encoder states must be a non-empty (T, d) matrix")
    scores = h @ s
    z = np.exp(scores - scores.max())
    weights = z / z.sum()
    return weights @ h, weights


# -- tensor-level attention cores --------------------------------------------

def to_sequence(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def to_image(x: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N,C,H,W)."""
    n, hw, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (n, c, h, w))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """softmax(Q K^T / sqrt(d)) V with the full weight map on the tape.

    q: (N,Lq,d), k: (N,Lk,d), v: (N,Lk,c) -> ((N,Lq,c), weights (N,Lq,Lk)).
    """
    d = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=2)
    return T.matmul(weights, v), weights


def scaled_dot_attention_streaming(q: Tensor, k: Tensor, v: Tensor, chunk: int = 512):
    """Chunked scaled-dot attention that never materializes the weight map.

    Processes query rows in blocks, recomputing the softmax in backward, and
    returns (attended, population variance of all weight entries) so the
    regularizer stays available without the map.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    n, lq, _ = q.shape
    lk = k.shape[1]
    qd, kd, vd = q.data, k.data, v.data
    kt = kd.swapaxes(1, 2)

    out_data = np.empty((n, lq, vd.shape[-1]), dtype=qd.dtype)
    total = n * lq * lk
    w_sum = 0.0
    w_sumsq = 0.0
    for lo in range(0, lq, chunk):
        hi = min(lo + chunk, lq)
        s = (qd[:, lo:hi] @ kt) * scale
        s -= s.max(axis=2, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=2, keepdims=True)
        out_data[:, lo:hi] = s @ vd
        w_sum += float(s.sum(dtype=np.float64))
        w_sumsq += float((s * s).sum(dtype=np.float64))
    w_mean = w_sum / total
    var_data = np.asarray(w_sumsq / total - w_mean * w_mean, dtype=qd.dtype)

    track = T._track(q, k, v)
    out = Tensor._wrap(out_data, track)
    var = Tensor._wrap(var_data, track)
    if not track:
        return out, var

    def bw(gs):
        g_out, g_var = gs
        gq = np.zeros_like(qd) if q.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        gv = np.zeros_like(vd) if v.requires_grad else None
        for lo in range(0, lq, chunk):
            hi = min(lo + chunk, lq)
            s = (qd[:, lo:hi] @ kt) * scale
            s -= s.max(axis=2, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=2, keepdims=True)  # s is now the weight block
            gw = np.zeros_like(s)
            if g_out is not None:
                gw += g_out[:, lo:hi] @ vd.swapaxes(1, 2)
            if g_var is not None:
                gw += g_var * (2.0 / total) * (s - w_mean)
            gs_block = s * (gw - (gw * s).sum(axis=2, keepdims=True))
            if gq is not None:
                gq[:, lo:hi] = (gs_block @ kd) * scale
            if gk is not None:
                gk += (gs_block.swapaxes(1, 2) @ qd[:, lo:hi]) * scale
            if gv is not None and g_out is not None:
                gv += s.swapaxes(1, 2) @ g_out[:, lo:hi]
        if gq is not None:
            accumulate_grad(q, gq)
        if gk is not None:
            accumulate_grad(k, gk)
        if gv is not None:
            accumulate_grad(v, gv)

    record_op(bw, (out, var))
    return out, var


def additive_scores(qp: Tensor, kp: Tensor, vvec: Tensor, chunk: int = 256) -> Tensor:
    """Scores s[n,i,j] = sum_d v[d] * tanh(qp[n,i,d] + kp[n,j,d]).

    The (Lq, Lk, d) tanh intermediate is never held in full: forward and
    backward walk query chunks and recompute it.
    """
    n, lq, d = qp.shape
    lk = kp.shape[1]
    if kp.shape[-1] != d or vvec.shape != (d,):
        raise ShapeError(f"additive scorer dims disagree: qp {qp.shape}, kp {kp.shape}, v {vvec.shape}")
    qd, kd, vd = qp.data, kp.data, vvec.data

    out_data = np.empty((n, lq, lk), dtype=qd.dtype)
    for lo in range(0, lq, chunk):
        hi = min(lo + chunk, lq)
        t = np.tanh(qd[:, lo:hi, None, :] + kd[:, None, :, :])
        out_data[:, lo:hi] = t @ vd

    track = T._track(qp, kp, vvec)

    def bw(g):
        gq = np.zeros_like(qd) if qp.requires_grad else None
        gk = np.zeros_like(kd) if kp.requires_grad else None
        gv = np.zeros_like(vd) if vvec.requires_grad else None
        for lo in range(0, lq, chunk):
            hi = min(lo + chunk, lq)
            t = np.tanh(qd[:, lo:hi, None, :] + kd[:, None, :, :])
            gc = g[:, lo:hi]
            if gv is not None:
                gv += np.einsum("nij,nijd->d", gc, t, optimize=True)
            # reuse t in place: t <- gc * v * (1 - t^2)
            np.multiply(t, t, out=t)
            np.subtract(1.0, t, out=t)
            t *= vd
            t *= gc[..., None]
            if gq is not None:
                gq[:, lo:hi] = t.sum(axis=2)
            if gk is not None:
                gk += t.sum(axis=1)
        if gq is not None:
            accumulate_grad(qp, gq)
        if gk is not None:
            accumulate_grad(kp, gk)
        if gv is not None:
            accumulate_grad(vvec, gv)

    return T._out(out_data, track, bw)


# -- gates -------------------------------------------------------------------

def _scalar_param() -> Tensor:
    return Tensor(np.zeros(()), requires_grad=True)


class _GateBase(Module):
    """Common merge logic and map bookkeeping for all gate variants."""

    def __init__(self):
        super().__init__()
        self.materialize_limit = MATERIALIZE_LIMIT
        self._last_attention: Tensor | None = None

    @property
    def last_attention(self) -> Tensor | None:
        """Most recent attention map; None when the grid was too large to keep."""
        return self._last_attention

    def _check_grids(self, x: Tensor, skip: Tensor) -> None:
        if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"query grid {skip.shape} does not match key grid {x.shape} "
                "(encoder residual and upsampled decoder feature must align)"
            )

    def _dot_attend(self, q: Tensor, k: Tensor, v: Tensor):
        """Returns (attended sequence, regularizer entry: map or variance)."""
        lq, lk = q.shape[1], k.shape[1]
        if max(lq, lk) <= self.materialize_limit:
            attended, weights = scaled_dot_attention(q, k, v)
            self._last_attention = weights
            return attended, weights
        attended, var = scaled_dot_attention_streaming(q, k, v)
        self._last_attention = None
        return attended, var

    def _merge(self, x: Tensor, attended_img: Tensor) -> Tensor:
        return T.add(x, T.mul(self.gain, attended_img))


class PLAGate(_GateBase):
    """Progressive gate: key/value come from the refined, upsampled lower
    decoder feature; the raw encoder residual is the query."""

    def __init__(self, c_low: int, c: int, expansion: int = 6):
        super().__init__()
        self.key_dimension = c
        self.refine = IRBlock(c_low, c_low, stride=1, expansion=expansion)
        self.upsample = ConvTranspose2d(c_low, c, k=2, stride=2)
        self.kv = PointwiseConv(c, 2 * c)
        self.gain = _scalar_param()

    def forward(self, decoder_low: Tensor, x: Tensor, skip: Tensor):
        self._check_grids(x, skip)
        kv_src = self.upsample(self.refine(decoder_low))
        self._check_grids(kv_src, skip)
        k_img, v_img = T.split(self.kv(kv_src), 2, axis=1)
        q = to_sequence(skip)
        attended, reg_entry = self._dot_attend(q, to_sequence(k_img), to_sequence(v_img))
        h, w = skip.shape[2:]
        return self._merge(x, to_image(attended, h, w)), reg_entry


def pla_forward(gate: PLAGate, decoder_low: Tensor, encoder_residual: Tensor):
    """Run a PLA gate with the gate's own path supplying the decoder stream."""
    x = gate.upsample(gate.refine(decoder_low))
    return gate.forward(decoder_low, x, encoder_residual)


class SelfAttentionGate(_GateBase):
    """Q, K, V all projected from the upsampled decoder feature itself."""

    def __init__(self, c: int):
        super().__init__()
        self.key_dimension = c
        self.q_proj = PointwiseConv(c, c)
        self.k_proj = PointwiseConv(c, c)
        self.v_proj = PointwiseConv(c, c)
        self.gain = _scalar_param()

    def forward(self, decoder_low: Tensor, x: Tensor, skip: Tensor):
        self._check_grids(x, skip)
        q = to_sequence(self.q_proj(x))
        attended, reg_entry = self._dot_attend(
            q, to_sequence(self.k_proj(x)), to_sequence(self.v_proj(x)))
        h, w = x.shape[2:]
        return self._merge(x, to_image(attended, h, w)), reg_entry


class CrossAttentionGate(_GateBase):
    """Q projects the encoder residual; K, V project the decoder feature."""

    def __init__(self, c: int):
        super().__init__()
        self.key_dimension = c
        self.q_proj = PointwiseConv(c, c)
        self.k_proj = PointwiseConv(c, c)
        self.v_proj = PointwiseConv(c, c)
        self.gain = _scalar_param()

    def forward(self, decoder_low: Tensor, x: Tensor, skip: Tensor):
        self._check_grids(x, skip)
        q = to_sequence(self.q_proj(skip))
        attended, reg_entry = self._dot_attend(
            q, to_sequence(self.k_proj(x)), to_sequence(self.v_proj(x)))
        h, w = x.shape[2:]
        return self._merge(x, to_image(attended, h, w)), reg_entry


class AdditiveAttentionGate(_GateBase):
    """Bahdanau-style scorer v . tanh(W1 q + W2 k) over the same grids."""

    def __init__(self, c: int, hidden: int | None = None):
        super().__init__()
        self.key_dimension = c
        self.hidden = hidden if hidden is not None else c
        self.w_q = PointwiseConv(c, self.hidden)
        self.w_k = PointwiseConv(c, self.hidden)
        self.score_v = Tensor(np.zeros(self.hidden), requires_grad=True)
        self.v_proj = PointwiseConv(c, c)
        self.gain = _scalar_param()

    def forward(self, decoder_low: Tensor, x: Tensor, skip: Tensor):
        self._check_grids(x, skip)
        lq = skip.shape[2] * skip.shape[3]
        if lq > self.materialize_limit:
            raise ShapeError(
                f"additive attention grid {lq} exceeds the materialization "
                f"limit {self.materialize_limit}"
            )
        qp = to_sequence(self.w_q(skip))
        kp = to_sequence(self.w_k(x))
        scores = additive_scores(qp, kp, self.score_v)
        weights = T.softmax(scores, axis=2)
        self._last_attention = weights
        attended = T.matmul(weights, to_sequence(self.v_proj(x)))
        h, w = x.shape[2:]
        return self._merge(x, to_image(attended, h, w)), weights


GATE_VARIANTS = {
    "pla": PLAGate,
    "self": SelfAttentionGate,
    "cross": CrossAttentionGate,
    "additive": AdditiveAttentionGate,
}


def make_gate(variant: str, c_low: int, c: int, expansion: int = 6) -> _GateBase:
    if variant == "pla":
        return PLAGate(c_low, c, expansion=expansion)
    if variant == "self":
        return SelfAttentionGate(c)
    if variant == "cross":
        return CrossAttentionGate(c)
    if variant == "additive":
        return AdditiveAttentionGate(c)
    raise ValueError(f"unknown attention variant: {variant!r}")
