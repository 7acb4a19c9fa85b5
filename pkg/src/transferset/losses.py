"""Knowledge-transfer loss kernels with analytic gradients.

Plain float64 numpy implementations meant for verification: every function
returns the loss together with its gradient with respect to the student-side
input, and the gradients are checked against central finite differences in
the test suite (and by ``transferset losses check``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

KD_TEMPERATURE = 1.0
CONTRASTIVE_TEMPERATURE = 0.07
CLIP_DIM = 768
DINOV2_DIM = 1024


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray


def _f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def kd_kl_loss(student, teacher, temperature: float = KD_TEMPERATURE) -> LossOutput:
    """Batch mean of ``T^2 * KL(softmax(teacher/T) || softmax(student/T))`` over ``b x c`` logits."""
    s = _f64(student, "student")
    t = _f64(teacher, "teacher")
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    if s.ndim != 2:
        raise ValueError("logits must be b x c")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    T = float(temperature)
    log_q = log_softmax(s / T)
    log_p = log_softmax(t / T)
    p = np.exp(log_p)
    b = s.shape[0]
    kl = (p * (log_p - log_q)).sum(axis=1)
    loss = T * T * kl.mean()
    grad = T * (np.exp(log_q) - p) / b
    return LossOutput(float(max(loss, 0.0)), grad)


def pixelwise_kl(student, teacher, temperature: float = KD_TEMPERATURE) -> LossOutput:
    """KD loss at every pixel of ``b x c x h x w`` logits, averaged over ``b*h*w``."""
    s = _f64(student, "student")
    t = _f64(teacher, "teacher")
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    if s.ndim != 4:
        raise ValueError("dense logits must be b x c x h x w")
    b, c, h, w = s.shape
    flat_s = s.transpose(0, 2, 3, 1).reshape(-1, c)
    flat_t = t.transpose(0, 2, 3, 1).reshape(-1, c)
    out = kd_kl_loss(flat_s, flat_t, temperature)
    grad = out.grad.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return LossOutput(out.loss, np.ascontiguousarray(grad))


def cross_entropy(logits, labels) -> LossOutput:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    x = _f64(logits, "logits")
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("expected b x c logits and b labels")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if (y < 0).any() or (y >= x.shape[1]).any():
        raise ValueError(f"label out of range [0, {x.shape[1]})")
    b = x.shape[0]
    lsm = log_softmax(x)
    loss = -lsm[np.arange(b), y].mean()
    grad = np.exp(lsm)
    grad[np.arange(b), y] -= 1.0
    return LossOutput(float(max(loss, 0.0)), grad / b)


def info_nce_contrastive(
    student_emb,
    teacher_emb,
    temperature: float = CONTRASTIVE_TEMPERATURE,
    *,
    check_norm: bool = True,
) -> LossOutput:
    """Symmetric InfoNCE between aligned rows of student and teacher embeddings.

    Logits are ``student @ teacher.T / temperature`` with positives on the
    diagonal; the loss averages the row-wise and column-wise cross entropies.
    Inputs are taken as already projected and L2-normalized.
    """
    s = _f64(student_emb, "student")
    t = _f64(teacher_emb, "teacher")
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"expected matching b x d inputs, got {s.shape} and {t.shape}")
    b = s.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if check_norm:
        for name, arr in (("student", s), ("teacher", t)):
            norms = np.linalg.norm(arr, axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise ValueError(f"{name} rows must be L2-normalized")
    logits = s @ t.T / temperature
    idx = np.arange(b)
    lsm_row = log_softmax(logits, axis=1)
    lsm_col = log_softmax(logits, axis=0)
    loss = -0.5 * (lsm_row[idx, idx].mean() + lsm_col[idx, idx].mean())
    eye = np.eye(b)
    d_logits = 0.5 * ((np.exp(lsm_row) - eye) + (np.exp(lsm_col) - eye)) / b
    grad = d_logits @ t / temperature
    return LossOutput(float(loss), grad)


def cosine_sim_loss(student_patch, teacher_patch) -> LossOutput:
    """Mean of ``1 - cos`` between student and teacher vectors at each ``(b, h, w)`` location of ``b x d x h x w`` grids."""
    s = _f64(student_patch, "student")
    t = _f64(teacher_patch, "teacher")
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    if s.ndim != 4:
        raise ValueError("patch features must be b x d x h x w")
    ns = np.sqrt((s * s).sum(axis=1, keepdims=True))
    nt = np.sqrt((t * t).sum(axis=1, keepdims=True))
    if (ns <= 1e-12).any() or (nt <= 1e-12).any():
        raise ValueError("zero-norm location vector")
    cos = (s * t).sum(axis=1, keepdims=True) / (ns * nt)
    count = s.shape[0] * s.shape[2] * s.shape[3]
    loss = float((1.0 - cos).sum() / count)
    grad = -(t / (ns * nt) - cos * s / (ns * ns)) / count
    return LossOutput(loss, grad)


def linear_projection(x, weight, bias) -> tuple[np.ndarray, Callable[[np.ndarray], tuple]]:
    """Affine map ``x @ weight.T + bias``.

    Returns the output and a backward function mapping the upstream gradient
    to ``(grad_x, grad_weight, grad_bias)``.
    """
    x = _f64(x, "x")
    W = _f64(weight, "weight")
    bvec = _f64(bias, "bias")
    if x.ndim != 2 or W.ndim != 2 or bvec.ndim != 1:
        raise ValueError("expected x: b x d_in, weight: d_out x d_in, bias: d_out")
    if W.shape[1] != x.shape[1] or bvec.shape[0] != W.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, weight {W.shape}, bias {bvec.shape}")
    y = x @ W.T + bvec

    def backward(grad_y):
        g = np.asarray(grad_y, dtype=np.float64)
        if g.shape != y.shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {y.shape}")
        return g @ W, g.T @ x, g.sum(axis=0)

    return y, backward


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` 1-D linear interpolation weights, half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def feature_resize_bilinear(patch, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of each channel of a ``b x d x h x w`` grid (align_corners=False)."""
    x = _f64(patch, "patch")
    if x.ndim != 4:
        raise ValueError("patch features must be b x d x h x w")
    h, w = x.shape[2:]
    if min(h, w, out_h, out_w) < 1:
        raise ValueError("spatial sizes must be >= 1")
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    return np.einsum("oh,bdhw,pw->bdop", rh, x, rw)


def feature_resize_bilinear_backward(grad_out, in_h: int, in_w: int) -> np.ndarray:
    """Gradient of :func:`feature_resize_bilinear` with respect to its input."""
    g = _f64(grad_out, "grad_out")
    out_h, out_w = g.shape[2:]
    rh = _interp_matrix(in_h, out_h)
    rw = _interp_matrix(in_w, out_w)
    return np.einsum("oh,bdop,pw->bdhw", rh, g, rw)
