"""
Backprop - Manual reverse-mode differentiation of the transformer
Gradients flow through both uses of the tied embedding (lookup and unembedding)
"""

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core import numerics
from core.errors import LengthError
from core.model import ForwardCache, LayerCache, TransformerModel, Weights


def _rms_norm_backward(dy: np.ndarray, x: np.ndarray, inv: np.ndarray, scale: np.ndarray):
    """
    Backward of y = x * inv * scale with inv = (mean(x^2) + eps)^-1/2

    Returns:
        (dx, dscale)
    """
    dscale = np.sum(dy * x * inv, axis=0)
    g = dy * scale
    n = x.shape[-1]
    dx = inv * (g - (inv * inv / n) * x * np.sum(x * g, axis=-1, keepdims=True))
    return dx, dscale


def _layer_backward(model: TransformerModel, layer: int, c: LayerCache, dx: np.ndarray, grads: Dict[str, np.ndarray]):
    """Propagate dL/dx_out of one block to dL/dx_in, accumulating weight gradients."""
    w = model.weights
    p = f"layers.{layer}."

    # GLU sublayer
    m = numerics.silu(c.gate) * c.up
    w_out = w.layer(layer, "w_out")
    grads[p + "w_out"] = m.T @ dx
    dm = dx @ w_out.T
    dgate = dm * c.up * numerics.silu_grad(c.gate)
    dup = dm * numerics.silu(c.gate)
    grads[p + "w_gate"] = dgate.T @ c.h2
    grads[p + "w_up"] = dup.T @ c.h2
    dh2 = dgate @ w.layer(layer, "w_gate") + dup @ w.layer(layer, "w_up")
    dmid, grads[p + "glu_norm"] = _rms_norm_backward(dh2, c.x_mid, c.inv2, w[p + "glu_norm"])
    dx_mid = dx + dmid

    # Attention sublayer; every head output receives the full residual gradient
    w_o = w.layer(layer, "w_o")
    dattn = dx_mid[None, :, :]
    grads[p + "w_o"] = np.matmul(dattn.transpose(0, 2, 1), c.z)
    dz = np.matmul(dattn, w_o)
    dpattern = np.matmul(dz, c.v.transpose(0, 2, 1))
    dv = np.matmul(c.pattern.transpose(0, 2, 1), dz)
    dscores = c.pattern * (dpattern - np.sum(c.pattern * dpattern, axis=-1, keepdims=True))
    dscores = dscores * dscores.dtype.type(model.scale)
    dq = np.matmul(dscores, c.k)
    dk = np.matmul(dscores.transpose(0, 2, 1), c.q)
    h = c.h[None, :, :]
    grads[p + "w_q"] = np.matmul(dq.transpose(0, 2, 1), h)
    grads[p + "w_k"] = np.matmul(dk.transpose(0, 2, 1), h)
    grads[p + "w_v"] = np.matmul(dv.transpose(0, 2, 1), h)
    dh = (
        np.matmul(dq, w.layer(layer, "w_q")).sum(axis=0)
        + np.matmul(dk, w.layer(layer, "w_k")).sum(axis=0)
        + np.matmul(dv, w.layer(layer, "w_v")).sum(axis=0)
    )
    din, grads[p + "attn_norm"] = _rms_norm_backward(dh, c.x_in, c.inv1, w[p + "attn_norm"])
    return dx_mid + din


def loss_positions(n_tokens: int, completion_start: Optional[int]) -> np.ndarray:
    """Positions whose next-token prediction is scored."""
    first = 0 if completion_start is None else max(completion_start - 1, 0)
    return np.arange(first, n_tokens - 1)


def next_token_loss(
    model: TransformerModel,
    tokens: Sequence[int],
    completion_start: Optional[int] = None,
) -> Tuple[float, Weights]:
    """
    Mean next-token cross-entropy and its gradient

    Args:
        model: Model to differentiate
        tokens: Token sequence of length >= 2
        completion_start: Index of the first completion token; predictions of
            earlier tokens are masked. None scores every position.

    Returns:
        (loss, gradients with the shapes of the model weights)
    """
    if len(tokens) < 2:
        raise LengthError("next_token_loss needs at least two tokens")
    logits, cache = model.forward_with_cache(tokens)
    positions = loss_positions(len(tokens), completion_start)
    targets = np.asarray(tokens, dtype=np.int64)[positions + 1]
    n = len(positions)

    log_probs = numerics.log_softmax_rows(logits[positions])
    loss = float(-np.mean(log_probs[np.arange(n), targets], dtype=np.float64)) if n else 0.0

    dlogits = np.zeros_like(logits)
    if n:
        probs = np.exp(log_probs)
        probs[np.arange(n), targets] -= 1
        dlogits[positions] = probs / logits.dtype.type(n)
    return loss, _backward(model, cache, dlogits)


def _backward(model: TransformerModel, cache: ForwardCache, dlogits: np.ndarray) -> Weights:
    w = model.weights
    grads: Dict[str, np.ndarray] = {}
    embed_grad = cache.hf.T @ dlogits
    dhf = dlogits @ w["embed"].T
    dx, grads["final_norm"] = _rms_norm_backward(dhf, cache.x_final, cache.invf, w["final_norm"])
    for layer in reversed(range(model.config.n_layers)):
        dx = _layer_backward(model, layer, cache.layers[layer], dx, grads)

    ids = np.asarray(cache.tokens, dtype=np.int64)
    lookup = np.zeros((w["embed"].shape[1], w["embed"].shape[0]), dtype=dx.dtype)
    np.add.at(lookup, ids, dx)
    grads["embed"] = embed_grad + lookup.T
    pos_grad = np.zeros_like(w["pos"])
    pos_grad[: len(ids)] = dx
    grads["pos"] = pos_grad
    return Weights(model.config, grads)


def batch_loss(model: TransformerModel, batch: Sequence[Tuple[Sequence[int], int]]) -> float:
    """Mean of per-sequence losses without gradients."""
    losses = []
    for tokens, start in batch:
        logits, _ = model.forward(tokens)
        positions = loss_positions(len(tokens), start)
        if not len(positions):
            continue
        targets = np.asarray(tokens, dtype=np.int64)[positions + 1]
        log_probs = numerics.log_softmax_rows(logits[positions])
        losses.append(-np.mean(log_probs[np.arange(len(positions)), targets], dtype=np.float64))
    return float(np.mean(losses)) if losses else 0.0
