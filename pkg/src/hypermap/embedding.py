"""Exact t-SNE projection of feature vectors to a 2-D neighbourhood plane."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericError
from .seeding import rng_for

log = logging.getLogger(__name__)

_TINY = 1e-12


@dataclass
class EmbeddingConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    step_size: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError(f"iterations must be >= 1, got {self.iterations}")
        if not self.perplexity > 1:
            raise InputError(f"perplexity must exceed 1, got {self.perplexity}")

    def check_size(self, n: int) -> None:
        if not 1 < self.perplexity < n / 3:
            raise InputError(f"perplexity {self.perplexity} must lie in (1, N/3) = (1, {n / 3:.3g}) for N={n}")


@dataclass
class Embedding:
    coords: np.ndarray  # [N, 2]
    kl_trace: list[float] = field(default_factory=list)

    def write_table(self, path, ids=None, labels=None) -> None:
        """``id,x,y,label`` text table with a header line; label -1 when unknown."""
        n = len(self.coords)
        ids = range(n) if ids is None else ids
        labels = [-1] * n if labels is None else labels
        lines = ["id,x,y,label"]
        for i, (x, y), lab in zip(ids, self.coords, labels):
            lines.append(f"{i},{float(x)!r},{float(y)!r},{int(lab)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_affinities(
    X: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional Gaussian affinities ``P[i, j] = p(j | i)`` at the requested perplexity.

    Each row's precision is found by bisection on its logarithm, all rows at
    once. Distances are shifted by the row minimum and scaled by the row mean
    first, which leaves the conditional distribution unchanged but puts every
    row's precision in a common bracket.

    Returns the conditionals and the achieved perplexity of every row.
    """
    x = np.asarray(X, dtype=np.float64)
    n = len(x)
    if x.ndim != 2 or n < 4:
        raise InputError(f"need at least 4 points as an [N, D] array, got shape {x.shape}")
    if not 1 < perplexity < n - 1:
        raise InputError(f"perplexity {perplexity} infeasible for N={n}; need 1 < perplexity < N-1")
    d = squared_distances(x)
    off = ~np.eye(n, dtype=bool)
    rows = d[off].reshape(n, n - 1)
    rows = rows - rows.min(axis=1, keepdims=True)
    scale = rows.mean(axis=1, keepdims=True)
    rows = rows / np.where(scale > 0, scale, 1.0)

    target = np.log(perplexity)
    lo = np.full(n, -50.0)
    hi = np.full(n, 50.0)
    log_beta = np.zeros(n)

    def row_probs(lb):
        w = np.exp(-np.exp(lb)[:, None] * rows)
        return w / w.sum(axis=1, keepdims=True)

    def row_perplexity(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
        return np.exp(h), h

    p = row_probs(log_beta)
    perp, h = row_perplexity(p)
    for _ in range(max_steps):
        done = np.abs(perp - perplexity) <= tol
        if done.all():
            break
        # Entropy falls as precision grows.
        too_flat = h > target
        lo = np.where(~done & too_flat, log_beta, lo)
        hi = np.where(~done & ~too_flat, log_beta, hi)
        log_beta = np.where(done, log_beta, 0.5 * (lo + hi))
        p = row_probs(log_beta)
        perp, h = row_perplexity(p)
    cond = np.zeros((n, n))
    cond[off] = p.ravel()
    return cond, perp


def pairwise_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetric joint affinities ``(P + P^T) / 2N`` with zero diagonal."""
    cond, _ = conditional_affinities(X, perplexity)
    return (cond + cond.T) / (2.0 * len(cond))


def _student_t(y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = _student_t(Y)
    q = np.maximum(num / num.sum(), _TINY)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / q[mask])))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    num = _student_t(Y)
    q = num / num.sum()
    w = (P - q) * num
    return 4.0 * (w.sum(axis=1)[:, None] * Y - w @ Y)


def tsne_fit(P: np.ndarray, cfg: EmbeddingConfig) -> Embedding:
    """Gradient descent with momentum and early exaggeration on the t-SNE objective."""
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    if P.shape != (n, n) or not np.allclose(P, P.T) or abs(P.sum() - 1) > 1e-6:
        raise InputError("P must be a symmetric N x N affinity matrix summing to 1")
    rng = rng_for(cfg.seed, "embedding/init")
    y = rng.normal(0.0, 1e-2, (n, 2))
    velocity = np.zeros_like(y)
    trace = []
    for it in range(cfg.iterations):
        exaggeration = cfg.early_exaggeration if it < cfg.exaggeration_iters else 1.0
        momentum = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        num = _student_t(y)
        q = num / num.sum()
        mask = P > 0
        trace.append(float(np.sum(P[mask] * np.log(P[mask] / np.maximum(q[mask], _TINY)))))
        w = (exaggeration * P - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite t-SNE gradient at iteration {it}")
        velocity = momentum * velocity - cfg.step_size * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return Embedding(y, trace)


def embed(features: np.ndarray, cfg: EmbeddingConfig) -> Embedding:
    cfg.check_size(len(features))
    return tsne_fit(pairwise_affinities(features, cfg.perplexity), cfg)


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    ys = (np.arange(size) * h) // size
    xs = (np.arange(size) * w) // size
    return img[ys[:, None], xs[None, :]]


def image_scatter(
    emb: Embedding, patches, canvas, thumb: int | None = None, background: float = 0.0
) -> np.ndarray:
    """Paste patch thumbnails at their embedded positions on a blank canvas.

    Coordinates are scaled uniformly into the canvas minus a 5% margin on every
    side and centred; later patches overwrite earlier ones where they overlap.
    """
    ch, cw = (canvas, canvas) if np.isscalar(canvas) else canvas
    ch, cw = int(ch), int(cw)
    if ch < 1 or cw < 1:
        raise InputError(f"canvas must be positive, got {ch}x{cw}")
    if len(patches) != len(emb.coords):
        raise InputError(f"{len(patches)} patches for {len(emb.coords)} embedded points")
    out = np.full((ch, cw), background, np.float32)
    if not len(patches):
        return out
    pts = np.asarray(emb.coords, dtype=np.float64)
    mx, my = 0.05 * cw, 0.05 * ch
    span = pts.max(axis=0) - pts.min(axis=0)
    avail = np.array([cw - 1 - 2 * mx, ch - 1 - 2 * my])
    with np.errstate(divide="ignore"):
        scale = np.min(np.where(span > 0, avail / np.where(span > 0, span, 1), np.inf))
    if not np.isfinite(scale):
        scale = 0.0
    centre = (pts.max(axis=0) + pts.min(axis=0)) / 2
    pix = (pts - centre) * scale + np.array([(cw - 1) / 2, (ch - 1) / 2])
    for (px, py), patch in zip(pix, patches):
        img = np.asarray(patch, dtype=np.float32)
        img = img.reshape(img.shape[-2:])
        if thumb:
            img = _resize_nearest(img, thumb)
        h, w = img.shape
        y0 = int(round(py)) - h // 2
        x0 = int(round(px)) - w // 2
        ys, xs = max(y0, 0), max(x0, 0)
        ye, xe = min(y0 + h, ch), min(x0 + w, cw)
        if ye > ys and xe > xs:
            out[ys:ye, xs:xe] = img[ys - y0 : ye - y0, xs - x0 : xe - x0]
    return out
