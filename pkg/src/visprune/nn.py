"""Bare transformer pieces shared by the toy encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import softmax_inplace

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    # x * x * x rather than x**3: the float power is an order of magnitude slower
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    t += 1.0
    t *= 0.5 * x
    return t


@dataclass(frozen=True)
class BlockWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w_q, self.w_k, self.w_v, self.w_o, self.w_up, self.w_down)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def attention_probs(q: np.ndarray, k: np.ndarray, head_scale, causal: bool) -> np.ndarray:
    """Per-head attention probabilities, shape (heads, n, n). ``q``/``k`` are head-split."""
    dh = q.shape[-1]
    logits = np.matmul(q, k.transpose(0, 2, 1))
    logits *= np.asarray(head_scale, dtype=np.float64).reshape(-1, 1, 1) / np.sqrt(dh)
    if causal:
        n, m = logits.shape[1:]
        logits[:, ~np.tri(n, m, dtype=bool)] = -np.inf
    return softmax_inplace(logits, axis=-1)


def transformer_block(
    x: np.ndarray,
    w: BlockWeights,
    num_heads: int,
    head_scale=1.0,
    causal: bool = False,
    probs: np.ndarray | None = None,
):
    """Pre-norm attention + MLP block. Returns (output, q, k, attention probs).

    ``probs`` may be supplied to reuse attention computed by the caller.
    """
    h = layer_norm(x)
    q = h @ w.w_q
    k = h @ w.w_k
    v = h @ w.w_v
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    if probs is None:
        probs = attention_probs(qh, kh, head_scale, causal)
    ctx = np.matmul(probs, split_heads(v, num_heads))
    ctx = ctx.transpose(1, 0, 2).reshape(x.shape)
    x = x + ctx @ w.w_o
    x = x + gelu(layer_norm(x) @ w.w_up) @ w.w_down
    return x, q, k, probs
