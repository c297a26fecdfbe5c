"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written as plain nested-loop numpy/python,
sharing no code path with the package: a scalar convolver with replicate
padding, a scalar bilinear interpolator, brute-force KL by quadrature, and
the analytic noise-prediction oracle for Gaussian data.
"""

import math

import numpy as np


def ref_padding(k: int) -> tuple:
    """Smallest stride-1 padding with output >= input: total k-1, odd leftover
    to the leading side."""
    total = k - 1
    lead = (total + 1) // 2
    return lead, total - lead


def ref_anti_alias(img: np.ndarray, kernel: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Nested-loop depthwise cross-correlation with replicate padding."""
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    eff = kernel / kernel.sum()
    kh, kw = eff.shape
    h, w, c = img.shape
    pt, _ = ref_padding(kh)
    pl, _ = ref_padding(kw)
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        ii = min(max(i + a - pt, 0), h - 1)
                        jj = min(max(j + b - pl, 0), w - 1)
                        acc += eff[a, b] * img[ii, jj, ch]
                out[i, j, ch] = acc
    return np.clip(out, 0.0, 1.0) if clamp else out


def ref_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Scalar bilinear resize with half-pixel centers (align_corners off)."""
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        sy = (i + 0.5) * h / out_h - 0.5
        y0 = math.floor(sy)
        wy = sy - y0
        ya, yb = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(out_w):
            sx = (j + 0.5) * w / out_w - 0.5
            x0 = math.floor(sx)
            wx = sx - x0
            xa, xb = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            for ch in range(c):
                top = (1 - wx) * img[ya, xa, ch] + wx * img[ya, xb, ch]
                bot = (1 - wx) * img[yb, xa, ch] + wx * img[yb, xb, ch]
                out[i, j, ch] = (1 - wy) * top + wy * bot
    return out


def quad_kl(mu1: float, v1: float, mu2: float, v2: float, n: int = 400_000) -> float:
    """KL(N(mu1, v1) || N(mu2, v2)) by trapezoid quadrature."""
    s1, s2 = math.sqrt(v1), math.sqrt(v2)
    lo = min(mu1 - 12 * s1, mu2 - 12 * s2)
    hi = max(mu1 + 12 * s1, mu2 + 12 * s2)
    x = np.linspace(lo, hi, n)
    logp = -0.5 * ((x - mu1) ** 2 / v1) - 0.5 * math.log(2 * math.pi * v1)
    logq = -0.5 * ((x - mu2) ** 2 / v2) - 0.5 * math.log(2 * math.pi * v2)
    return float(np.trapz(np.exp(logp) * (logp - logq), x))


class GaussianEpsOracle:
    """Analytic posterior-mean noise predictor for x0 ~ N(m, s^2 I).

    Matches the network calling convention net(x_t, cond, t_input) where
    t_input = 1000 * t / T.
    """

    def __init__(self, sched, mean: float, var: float):
        self.sched = sched
        self.m = mean
        self.s2 = var

    def __call__(self, x_t, cond, t_input):
        import torch
        t = int(round(float(torch.as_tensor(t_input)) * self.sched.T / 1000.0))
        sbar = self.sched.sbar(t)
        prior_prec = 1.0 / self.s2
        like_prec = sbar / (1.0 - sbar)
        post_mean = (prior_prec * self.m + math.sqrt(sbar) / (1.0 - sbar) * x_t) / (
            prior_prec + like_prec)
        return (x_t - math.sqrt(sbar) * post_mean) / math.sqrt(1.0 - sbar)


def mc_band(std: float, n: int, k: float = 4.0) -> float:
    """k-standard-error Monte Carlo band for a sample mean."""
    return k * std / math.sqrt(n)


def var_band(var: float, n: int, k: float = 4.0) -> float:
    """k-standard-error band for a sample variance of Gaussian draws."""
    return k * var * math.sqrt(2.0 / (n - 1))
