"""Scaled dot-product attention: a reference kernel and a tiled streaming kernel.

Both operate on one head: ``q`` is (seq_q, head_dim), ``k``/``v`` are
(seq_k, head_dim). The causal mask is top-left aligned, i.e. query ``i`` sees
keys ``j <= i``, so every query row has at least one visible key.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, masked_fill, matmul, softmax, transpose

# Finite stand-in for -inf, keeps every forward value finite.
MASK_VALUE = -1e300


@dataclass
class ScoreProbe:
    """Records the largest score-shaped buffer a kernel allocates."""

    peak: int = 0
    buffers: list[tuple[int, int]] = field(default_factory=list)

    def record(self, shape: tuple[int, int]) -> None:
        self.buffers.append(shape)
        self.peak = max(self.peak, shape[0] * shape[1])


def _validate(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"attention expects matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[0] < 1 or k.shape[0] < 1:
        raise DimensionError("attention needs at least one query and one key")


def causal_keep(seq_q: int, seq_k: int, k_start: int = 0, k_stop: int | None = None) -> np.ndarray:
    k_stop = seq_k if k_stop is None else k_stop
    return np.arange(k_start, k_stop)[None, :] <= np.arange(seq_q)[:, None]


def naive_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    scale: float | None = None,
    probe: ScoreProbe | None = None,
) -> Tensor:
    """softmax(scale * q k^T + mask) v with the full score matrix materialized."""
    _validate(q, k, v)
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    scores = matmul(q, transpose(k)) * scale
    if probe is not None:
        probe.record(scores.shape)
    if causal:
        scores = masked_fill(scores, causal_keep(q.shape[0], k.shape[0]), MASK_VALUE)
    return matmul(softmax(scores, axis=1), v)


def _block_scores(qd, kb, scale, causal, start, stop, seq_k):
    s = (qd @ kb.T) * scale
    if causal:
        s = np.where(causal_keep(qd.shape[0], seq_k, start, stop), s, -np.inf)
    return s


def streaming_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    scale: float | None = None,
    block_size: int = 32,
    probe: ScoreProbe | None = None,
) -> Tensor:
    """Exact attention computed over key/value blocks with an online softmax.

    Only a (seq_q, block_size) score tile exists at any time. The forward pass
    keeps the per-row log-sum-exp; the backward pass recomputes each tile from
    it instead of storing probabilities.
    """
    _validate(q, k, v)
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    qd, kd, vd = q.data, k.data, v.data
    seq_q, seq_k = qd.shape[0], kd.shape[0]
    blocks = [(s, min(s + block_size, seq_k)) for s in range(0, seq_k, block_size)]

    m = np.full(seq_q, -np.inf)
    l = np.zeros(seq_q)
    acc = np.zeros((seq_q, vd.shape[1]))
    for start, stop in blocks:
        s = _block_scores(qd, kd[start:stop], scale, causal, start, stop, seq_k)
        if probe is not None:
            probe.record(s.shape)
        m_new = np.maximum(m, s.max(axis=1))
        # rows with nothing visible yet keep m_new == -inf; guard the exps
        live = np.isfinite(m_new)
        shift = np.where(live, m_new, 0.0)
        correction = np.where(live, np.exp(m - shift), 0.0)
        np.exp(s - shift[:, None], out=s)
        l = l * correction + s.sum(axis=1)
        acc = acc * correction[:, None] + s @ vd[start:stop]
        m = m_new
    out = acc / l[:, None]
    lse = m + np.log(l)

    def _back(g):
        dq = np.zeros_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        d = (g * out).sum(axis=1)
        for start, stop in blocks:
            s = _block_scores(qd, kd[start:stop], scale, causal, start, stop, seq_k)
            if probe is not None:
                probe.record(s.shape)
            p = np.exp(s - lse[:, None])
            dv[start:stop] = p.T @ g
            dp = g @ vd[start:stop].T
            ds = p * (dp - d[:, None])
            dq += (ds @ kd[start:stop]) * scale
            dk[start:stop] = (ds.T @ qd) * scale
        return dq, dk, dv

    return Tensor.from_op(out, (q, k, v), _back, "streaming_attention")


def attention(q, k, v, causal=False, scale=None, kernel="streaming", block_size=32):
    if kernel == "naive":
        return naive_attention(q, k, v, causal=causal, scale=scale)
    if kernel == "streaming":
        return streaming_attention(q, k, v, causal=causal, scale=scale, block_size=block_size)
    raise ValueError(f"unknown attention kernel {kernel!r}")


def peak_score_storage(
    seq_q: int, seq_k: int, head_dim: int, block_size: int, kernel: str = "streaming"
) -> int:
    """Peak element count of any score buffer, measured by running the kernel."""
    for name, val in (("seq_q", seq_q), ("seq_k", seq_k), ("head_dim", head_dim), ("block_size", block_size)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    probe = ScoreProbe()
    q = Tensor(np.zeros((seq_q, head_dim)))
    kv = Tensor(np.zeros((seq_k, head_dim)))
    if kernel == "naive":
        naive_attention(q, kv, kv, probe=probe)
    elif kernel == "streaming":
        streaming_attention(q, kv, kv, block_size=block_size, probe=probe)
    else:
        raise ValueError(f"unknown attention kernel {kernel!r}")
    return probe.peak
