"""Linear encoders onto the unit sphere, cosine similarity, and exact gradients.

Both modalities are projected by a single weight matrix and L2-normalized;
similarity is the dot product of the unit vectors. The two batch losses
(warm-up over all negatives, soft-margin triplet over hard negatives) return
exact analytic gradients with respect to the weight matrices, using the
zero subgradient at hinge kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container, kernels
from .errors import (DegenerateInputError, FormatError,
                     InsufficientNegativesError, ParameterError)


@dataclass
class EncoderPair:
    w_img: np.ndarray  # (d, d_img) float64
    w_txt: np.ndarray  # (d, d_txt) float64

    @property
    def d(self) -> int:
        return self.w_img.shape[0]

    def copy(self) -> "EncoderPair":
        return EncoderPair(self.w_img.copy(), self.w_txt.copy())


def init_encoders(d: int, d_img: int, d_txt: int, seed: int) -> EncoderPair:
    """Gaussian init scaled by 1/sqrt(fan_in)."""
    if d < 1 or d_img < 1 or d_txt < 1:
        raise ParameterError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    w_img = rng.standard_normal((d, d_img)) / np.sqrt(d_img)
    w_txt = rng.standard_normal((d, d_txt)) / np.sqrt(d_txt)
    return EncoderPair(w_img, w_txt)


def _project(w: np.ndarray, x: np.ndarray):
    """Project rows of x and normalize; returns (unit rows, pre-norm lengths)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != w.shape[1]:
        raise ParameterError(
            f"input dim {x.shape[1]} does not match encoder dim {w.shape[1]}")
    z = x @ w.T
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("input projects to (near-)zero vector")
    return z / norms[:, None], norms


def embed_image(enc: EncoderPair, image_raw: np.ndarray) -> np.ndarray:
    u, _ = _project(enc.w_img, image_raw)
    return u[0] if np.asarray(image_raw).ndim == 1 else u


def embed_text(enc: EncoderPair, text_raw: np.ndarray) -> np.ndarray:
    v, _ = _project(enc.w_txt, text_raw)
    return v[0] if np.asarray(text_raw).ndim == 1 else v


def similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ParameterError("similarity inputs must have equal shape")
    return float(u @ v)


def _backprop_to_weights(d_unit: np.ndarray, unit: np.ndarray,
                         norms: np.ndarray, x: np.ndarray) -> np.ndarray:
    # through u = z/|z|: dz = (g - (g.u) u)/|z|, then dW = dz^T x
    g = d_unit - (d_unit * unit).sum(axis=1, keepdims=True) * unit
    g /= norms[:, None]
    return g.T @ x


def _check_batch(images: np.ndarray, texts: np.ndarray) -> None:
    if images.shape[0] != texts.shape[0]:
        raise ParameterError("image and text batches must have equal length")
    if images.shape[0] < 2:
        raise InsufficientNegativesError("batch must hold >= 2 pairs")


def warmup_loss_and_grad(enc: EncoderPair, images: np.ndarray,
                         texts: np.ndarray, alpha: float):
    """Mean warm-up loss over the batch plus gradients w.r.t. both matrices.

    Every other in-batch item serves as a negative; each pair's two hinge
    sums are averaged over the batch-size-minus-one negatives.
    """
    images = np.atleast_2d(images)
    texts = np.atleast_2d(texts)
    _check_batch(images, texts)
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    u, nu = _project(enc.w_img, images)
    v, nv = _project(enc.w_txt, texts)
    loss, du, dv = kernels.warmup_loss_grads(u, v, alpha)
    g_img = _backprop_to_weights(du, u, nu, np.asarray(images, dtype=np.float64))
    g_txt = _backprop_to_weights(dv, v, nv, np.asarray(texts, dtype=np.float64))
    return loss, g_img, g_txt


def triplet_loss_and_grad(enc: EncoderPair, images: np.ndarray,
                          texts: np.ndarray, margins: np.ndarray):
    """Mean soft-margin triplet loss with in-batch hard negatives."""
    images = np.atleast_2d(images)
    texts = np.atleast_2d(texts)
    _check_batch(images, texts)
    margins = np.asarray(margins, dtype=np.float64)
    if margins.shape != (images.shape[0],):
        raise ParameterError("margins must hold one value per pair")
    if np.any(margins < 0):
        raise ParameterError("margins must be >= 0")
    u, nu = _project(enc.w_img, images)
    v, nv = _project(enc.w_txt, texts)
    loss, du, dv = kernels.triplet_loss_grads(u, v, margins)
    g_img = _backprop_to_weights(du, u, nu, np.asarray(images, dtype=np.float64))
    g_txt = _backprop_to_weights(dv, v, nv, np.asarray(texts, dtype=np.float64))
    return loss, g_img, g_txt


def sgd_step(enc: EncoderPair, g_img: np.ndarray, g_txt: np.ndarray,
             lr: float) -> EncoderPair:
    if lr < 0:
        raise ParameterError("lr must be >= 0")
    return EncoderPair(enc.w_img - lr * g_img, enc.w_txt - lr * g_txt)


def soft_margin(y_star, m: float, alpha: float):
    """Exponential soft margin alpha * (m**y - 1) / (m - 1), in [0, alpha].

    Better-matched pairs (y near 1) get the full margin; fully mismatched
    pairs (y = 0) get none. Accepts scalars or arrays.
    """
    if m <= 1:
        raise ParameterError("m must be > 1")
    y = np.asarray(y_star, dtype=np.float64)
    if np.any(y < 0) or np.any(y > 1):
        raise ParameterError("y_star must lie in [0, 1]")
    out = alpha * (np.power(m, y) - 1.0) / (m - 1.0)
    return float(out) if np.isscalar(y_star) else out


def save_weights(enc: EncoderPair, path) -> None:
    """Checkpoint to the shared binary container (float32 payload)."""
    d, d_img = enc.w_img.shape
    d_txt = enc.w_txt.shape[1]
    with open(path, "wb") as fh:
        container.write_header(fh, container.WEIGHTS_MAGIC, d, d_img, d_txt)
        container.write_f32_block(fh, enc.w_img)
        container.write_f32_block(fh, enc.w_txt)


def load_weights(path) -> EncoderPair:
    with open(path, "rb") as fh:
        d, d_img, d_txt, _, _ = container.read_header(fh, container.WEIGHTS_MAGIC)
        if d < 1:
            raise FormatError("embedding dim: must be >= 1")
        w_img = container.read_f32_block(fh, (d, d_img), "image weights")
        w_txt = container.read_f32_block(fh, (d, d_txt), "text weights")
    return EncoderPair(w_img.astype(np.float64), w_txt.astype(np.float64))
