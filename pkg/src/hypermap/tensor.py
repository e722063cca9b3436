"""Dense tensor kernels for the settlement network.

Tensors are plain :class:`numpy.ndarray` objects in channel-first, row-major
layout. Spatial kernels accept a single sample ``[C, H, W]`` or a batch
``[N, C, H, W]``; dense kernels accept ``[in]`` or ``[N, in]``. Every kernel
preserves the dtype of its inputs so the same code serves the float32
production path and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericError, ShapeError

__all__ = [
    "ConvParams",
    "DenseParams",
    "PoolSwitches",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_transpose",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "unpool2x2",
    "pool_with_switches",
    "relu",
    "relu_backward",
    "dense_forward",
    "dense_backward",
    "softmax_xent",
    "sgd_step",
    "bilinear_upsample",
]


@dataclass
class ConvParams:
    weights: np.ndarray  # [out_ch, in_ch, kh, kw]
    bias: np.ndarray  # [out_ch]
    padding: str = "same"
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output channels"
            )
        if self.padding not in ("same", "valid"):
            raise InputError(f"unknown padding {self.padding!r}")
        if self.stride != 1:
            raise InputError(f"only stride 1 is supported, got {self.stride}")
        kh, kw = self.weights.shape[2:]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")

    @property
    def pad(self) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        kh, kw = self.weights.shape[2:]
        return kh // 2, kw // 2


@dataclass
class DenseParams:
    weights: np.ndarray  # [out_units, in_units]
    bias: np.ndarray  # [out_units]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )


@dataclass
class PoolSwitches:
    """Argmax positions of a 2x2 max-pool.

    ``index`` holds ``2 * row + col`` of the winning cell inside each window
    and has the pooled output's shape. ``input_shape`` is the unpadded shape
    of the pooled tensor; odd extents were padded on the bottom/right edge by
    replication before pooling.
    """

    index: np.ndarray
    input_shape: tuple[int, ...]

    @property
    def rows(self) -> np.ndarray:
        return self.index // 2

    @property
    def cols(self) -> np.ndarray:
        return self.index % 2


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-D tensor or a batch of them, got shape {x.shape}")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains NaN or Inf")


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of padded batch ``xp`` [N,C,H,W] with ``w`` [O,C,kh,kw]."""
    kh, kw = w.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [N,C,H',W',kh,kw]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N,H',W',O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_forward(input: np.ndarray, p: ConvParams) -> np.ndarray:
    x, single = _as_batch(input, 3)
    out_ch, in_ch, kh, kw = p.weights.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv expects {in_ch} input channels, got {x.shape[1]}")
    if p.padding == "valid" and (x.shape[2] < kh or x.shape[3] < kw):
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {kh}x{kw} under valid padding")
    _check_finite(x, "conv input")
    ph, pw = p.pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    out = _correlate(xp, p.weights)
    out += p.bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(
    grad_out: np.ndarray, cached_input: np.ndarray, p: ConvParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a convolution with respect to input, weights and bias."""
    x, single = _as_batch(cached_input, 3)
    g, _ = _as_batch(grad_out, 3)
    out_ch, in_ch, kh, kw = p.weights.shape
    ph, pw = p.pad
    expected = (x.shape[0], out_ch, x.shape[2] + 2 * ph - kh + 1, x.shape[3] + 2 * pw - kw + 1)
    if g.shape != expected:
        raise ShapeError(f"conv grad_out shape {g.shape} does not match forward output {expected}")

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O,C,kh,kw]
    grad_b = g.sum(axis=(0, 2, 3))

    grad_x = _transpose_batch(g, p)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def _transpose_batch(g: np.ndarray, p: ConvParams) -> np.ndarray:
    # Full correlation with the spatially flipped, channel-swapped kernel.
    kh, kw = p.weights.shape[2:]
    ph, pw = p.pad
    qh, qw = kh - 1 - ph, kw - 1 - pw
    gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
    flipped = p.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _correlate(gp, np.ascontiguousarray(flipped))


def conv2d_transpose(signal: np.ndarray, p: ConvParams) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` without bias: maps output space back to input space."""
    g, single = _as_batch(signal, 3)
    if g.shape[1] != p.weights.shape[0]:
        raise ShapeError(f"transposed conv expects {p.weights.shape[0]} channels, got {g.shape[1]}")
    out = _transpose_batch(g, p)
    return out[0] if single else out


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """View a padded [N,C,2h,2w] tensor as [N,C,h,w,4] window cells."""
    n, c, hh, ww = x.shape
    return x.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, hh // 2, ww // 2, 4
    )


def _pad_even(x: np.ndarray) -> np.ndarray:
    ph, pw = x.shape[2] % 2, x.shape[3] % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x


def maxpool2x2_forward(input: np.ndarray) -> tuple[np.ndarray, PoolSwitches]:
    x, single = _as_batch(input, 3)
    if x.size == 0:
        raise ShapeError("cannot pool an empty tensor")
    cells = _pool_windows(_pad_even(x))
    index = cells.argmax(axis=-1).astype(np.int8)  # first occurrence on ties
    out = np.take_along_axis(cells, index[..., None].astype(np.intp), axis=-1)[..., 0]
    if single:
        return out[0], PoolSwitches(index[0], tuple(input.shape))
    return out, PoolSwitches(index, tuple(input.shape))


def _route(values: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    if values.shape != switches.index.shape:
        raise ShapeError(
            f"pooled tensor shape {values.shape} does not match switches {switches.index.shape}"
        )
    v, single = _as_batch(values, 3)
    idx, _ = _as_batch(switches.index, 3)
    n, c, h, w = v.shape
    cells = np.zeros((n, c, h, w, 4), dtype=v.dtype)
    np.put_along_axis(cells, idx[..., None].astype(np.intp), v[..., None], axis=-1)
    full = cells.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    H, W = switches.input_shape[-2:]
    # Padded cells are replicas of the last real row/column.
    if 2 * h > H:
        full[:, :, H - 1, :] += full[:, :, H, :]
    if 2 * w > W:
        full[:, :, :, W - 1] += full[:, :, :, W]
    full = full[:, :, :H, :W]
    return full[0] if single else full


def maxpool2x2_backward(grad_out: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    return _route(grad_out, switches)


def unpool2x2(pooled: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    """Place pooled values back at their recorded argmax positions, zeros elsewhere."""
    return _route(pooled, switches)


def pool_with_switches(input: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    """Re-pool ``input`` by gathering at recorded switch positions rather than taking a max."""
    if tuple(input.shape) != tuple(switches.input_shape):
        raise ShapeError(f"input {input.shape} does not match switch source {switches.input_shape}")
    x, single = _as_batch(input, 3)
    idx, _ = _as_batch(switches.index, 3)
    cells = _pool_windows(_pad_even(x))
    out = np.take_along_axis(cells, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out[0] if single else out


def relu(input: np.ndarray) -> np.ndarray:
    return np.maximum(input, 0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    if grad_out.shape != cached_input.shape:
        raise ShapeError(f"relu grad {grad_out.shape} vs input {cached_input.shape}")
    return np.where(cached_input > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dense_forward(input: np.ndarray, p: DenseParams) -> np.ndarray:
    if input.shape[-1] != p.weights.shape[1]:
        raise ShapeError(f"dense layer expects {p.weights.shape[1]} inputs, got {input.shape[-1]}")
    return input @ p.weights.T + p.bias


def dense_backward(
    grad_out: np.ndarray, cached_input: np.ndarray, p: DenseParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(W^T g, g x^T, g)``, summed over the batch axis when present."""
    if grad_out.shape[-1] != p.weights.shape[0] or cached_input.shape[-1] != p.weights.shape[1]:
        raise ShapeError(
            f"dense backward shapes grad {grad_out.shape}, input {cached_input.shape} "
            f"incompatible with weights {p.weights.shape}"
        )
    grad_x = grad_out @ p.weights
    if grad_out.ndim == 1:
        return grad_x, np.outer(grad_out, cached_input), grad_out.copy()
    return grad_x, grad_out.T @ cached_input, grad_out.sum(axis=0)


def softmax_xent(logits: np.ndarray, label):
    """Softmax cross-entropy.

    Works on one logit vector ``[K]`` with an integer label, or a batch
    ``[N, K]`` with an integer array of labels; the batched form returns
    per-sample losses and unscaled per-sample gradients.

    Returns
    -------
    loss, probs, grad_logits
    """
    z = np.asarray(logits)
    labels = np.asarray(label)
    k = z.shape[-1]
    if labels.shape != z.shape[:-1]:
        raise InputError(f"label shape {labels.shape} does not match logits {z.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"label {label} out of range for {k} classes")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    probs = e / total
    picked = np.take_along_axis(shifted, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = np.log(total[..., 0]) - picked
    grad = probs.copy()
    np.put_along_axis(
        grad,
        labels[..., None].astype(np.intp),
        np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1,
        axis=-1,
    )
    if z.ndim == 1:
        return float(loss), probs, grad
    return loss, probs, grad


def sgd_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * g`` over every named parameter."""
    if not lr >= 0:
        raise InputError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in layer {name!r}")
    if lr == 0:
        return
    for name, g in grads.items():
        p = params[name]
        p -= (lr * g).astype(p.dtype, copy=False)


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_in == 1:
        zeros = np.zeros(n_out, dtype=np.intp)
        return zeros, zeros, np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    # Integer positions get weight 0 on their own sample, so corners copy exactly.
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    return lo, np.minimum(lo + 1, n_in - 1), pos - lo


def bilinear_upsample(map: np.ndarray, H: int, W: int) -> np.ndarray:
    """Align-corners bilinear resize of ``[C, h, w]`` to ``[C, H, W]``."""
    if map.ndim != 3:
        raise ShapeError(f"upsample expects [C,h,w], got {map.shape}")
    c, h, w = map.shape
    if H < h or W < w:
        raise InputError(f"target {H}x{W} is smaller than source {h}x{w}")
    if (H, W) == (h, w):
        return map.copy()
    r0, r1, tr = _interp_axis(h, H)
    c0, c1, tc = _interp_axis(w, W)
    tr = tr.astype(map.dtype)[None, :, None]
    tc = tc.astype(map.dtype)[None, None, :]
    top = map[:, r0, :]
    rows = top + (map[:, r1, :] - top) * tr if h > 1 else top
    left = rows[:, :, c0]
    if w == 1:
        return np.ascontiguousarray(left)
    return left + (rows[:, :, c1] - left) * tc
