"""Central finite-difference checks for the loss kernels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses

FD_STEP = 1e-5
REL_TOL = 1e-4


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _cases(rng: np.random.Generator, i: int) -> dict[str, Callable[[], float]]:
    """One random instance per kernel; each returns its relative gradient error."""
    b = int(rng.integers(2, 7))
    c = int(rng.integers(2, 9))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    d = int(rng.integers(2, 9))
    T = float(rng.uniform(0.5, 4.0))

    def kd():
        s, t = rng.normal(size=(2, b, c)) * 2
        out = losses.kd_kl_loss(s, t, T)
        return rel_error(out.grad, numeric_grad(lambda z: losses.kd_kl_loss(z, t, T).loss, s))

    def pix():
        s, t = rng.normal(size=(2, b, c, h, w))
        out = losses.pixelwise_kl(s, t, T)
        return rel_error(out.grad, numeric_grad(lambda z: losses.pixelwise_kl(z, t, T).loss, s))

    def ce():
        x = rng.normal(size=(b, c)) * 2
        y = rng.integers(0, c, size=b)
        out = losses.cross_entropy(x, y)
        return rel_error(out.grad, numeric_grad(lambda z: losses.cross_entropy(z, y).loss, x))

    def nce():
        s = _unit_rows(rng.normal(size=(b, d)))
        t = _unit_rows(rng.normal(size=(b, d)))
        tau = float(rng.uniform(0.05, 1.0))
        out = losses.info_nce_contrastive(s, t, tau)
        f = lambda z: losses.info_nce_contrastive(z, t, tau, check_norm=False).loss  # noqa: E731
        return rel_error(out.grad, numeric_grad(f, s))

    def cos():
        s, t = rng.normal(size=(2, b, d, h, w))
        out = losses.cosine_sim_loss(s, t)
        return rel_error(out.grad, numeric_grad(lambda z: losses.cosine_sim_loss(z, t).loss, s))

    def proj():
        d_out = int(rng.integers(1, 7))
        x = rng.normal(size=(b, d))
        W = rng.normal(size=(d_out, d))
        bias = rng.normal(size=d_out)
        up = rng.normal(size=(b, d_out))
        _, backward = losses.linear_projection(x, W, bias)
        gx, gW, gb = backward(up)

        def scalar(xx, WW, bb):
            return float((losses.linear_projection(xx, WW, bb)[0] * up).sum())

        return max(
            rel_error(gx, numeric_grad(lambda z: scalar(z, W, bias), x)),
            rel_error(gW, numeric_grad(lambda z: scalar(x, z, bias), W)),
            rel_error(gb, numeric_grad(lambda z: scalar(x, W, z), bias)),
        )

    def resize():
        oh, ow = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal(size=(b, d, h, w))
        up = rng.normal(size=(b, d, oh, ow))
        g = losses.feature_resize_bilinear_backward(up, h, w)
        f = lambda z: float((losses.feature_resize_bilinear(z, oh, ow) * up).sum())  # noqa: E731
        return rel_error(g, numeric_grad(f, x))

    return {
        "kd_kl_loss": kd,
        "pixelwise_kl": pix,
        "cross_entropy": ce,
        "info_nce_contrastive": nce,
        "cosine_sim_loss": cos,
        "linear_projection": proj,
        "feature_resize_bilinear": resize,
    }


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def run_gradient_suite(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    """Finite-difference check of every differentiable kernel over ``trials`` random shapes."""
    worst: dict[str, float] = {}
    rng = np.random.default_rng(seed)
    for i in range(trials):
        for name, case in _cases(rng, i).items():
            worst[name] = max(worst.get(name, 0.0), case())
    return [CheckResult(name, trials, err) for name, err in worst.items()]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'kernel':<26}{'trials':>7}{'max rel err':>14}  result"]
    for r in results:
        lines.append(f"{r.name:<26}{r.trials:>7}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
