"""Stealth metrics for poisoned data: KL, SSIM, PSNR, gradient deviation, trigger strength."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import model as M
from .errors import DimensionMismatch, EmptyDataset, UntrainedModel

SMOOTHING = 1e-10
PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _region(images: np.ndarray, region) -> np.ndarray:
    if region is None:
        return images
    r, c, s = region
    return images[..., r:r + s, c:c + s]


def intensity_counts(images: np.ndarray, bins: int = 256, region=None) -> np.ndarray:
    """Pixel-intensity histogram over [0, 1], optionally inside an anchor square."""
    vals = np.asarray(_region(np.asarray(images, dtype=float), region)).ravel()
    return np.histogram(np.clip(vals, 0.0, 1.0), bins=bins, range=(0.0, 1.0))[0].astype(float)


def kl_from_counts(p_counts: np.ndarray, q_counts: np.ndarray) -> float:
    """``KL(P || Q)`` in nats from two histograms, with additive smoothing."""
    p = p_counts + SMOOTHING
    q = q_counts + SMOOTHING
    p, q = p / p.sum(), q / q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def kl_histogram(clean: np.ndarray, poisoned: np.ndarray, bins: int = 256, region=None) -> float:
    """KL divergence (poisoned || clean) between pixel-intensity marginals, in nats.

    ``region`` is an anchor square ``(row, col, side)``; ``None`` uses every pixel.
    """
    if bins < 16:
        raise ValueError("bins must be >= 16")
    if not len(clean) or not len(poisoned):
        raise EmptyDataset("both image sets must be non-empty")
    return kl_from_counts(intensity_counts(poisoned, bins, region),
                          intensity_counts(clean, bins, region))


def kl_gradient_bound(L_delta: float, delta_inf: float, input_dim: int = 1) -> tuple[float, float]:
    """Gradient-based KL bound: ``(L^2 d delta^2 / 2, L^2 delta^2 / 2)``."""
    if L_delta < 0 or delta_inf < 0 or input_dim < 1:
        raise ValueError("inputs must be non-negative and input_dim >= 1")
    d_free = 0.5 * L_delta**2 * delta_inf**2
    return d_free * input_dim, d_free


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over all 8x8 sliding windows (uniform weights)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    a, b = _gray(a), _gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionMismatch(f"images must be at least {SSIM_WINDOW} pixels per side")
    w = SSIM_WINDOW
    mean = lambda z: uniform_filter(z, size=w, mode="constant")
    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a**2
    var_b = mean(b * b) - mu_b**2
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    smap = num / den
    # windows fully inside the image; size-8 filters centre at offset 4
    lo = w // 2
    hi_r, hi_c = a.shape[0] - (w - 1 - lo), a.shape[1] - (w - 1 - lo)
    return float(smap[lo:hi_r, lo:hi_c].mean())


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def trigger_strength(params: dict, images: np.ndarray, trigger_apply) -> float:
    """Mean L2 displacement of the last hidden layer caused by the trigger."""
    if int(np.asarray(params.get("steps", 0))) <= 0:
        raise UntrainedModel("trigger strength needs a trained model")
    h0 = M.hidden(params, images)
    h1 = M.hidden(params, trigger_apply(images))
    return float(np.linalg.norm(h1 - h0, axis=1).mean())


def gradient_deviation(params: dict, x: np.ndarray, x_p: np.ndarray, y_true: int, y_target: int) -> float:
    """``|| grad_x l(x_p, y_target) - grad_x l(x, y_true) ||_2`` for one image."""
    g_p = M.input_grad(params, x_p, y_target)
    g_c = M.input_grad(params, x, y_true)
    return float(np.linalg.norm(g_p - g_c))


def lipschitz_estimate(params: dict, x: np.ndarray, x_p: np.ndarray, y_true: np.ndarray,
                       y_target: int) -> float:
    """Largest gradient-deviation to input-distance ratio over the given pairs."""
    g_p = M.input_grad(params, x_p, np.full(len(x_p), y_target))
    g_c = M.input_grad(params, x, y_true)
    num = np.linalg.norm((g_p - g_c).reshape(len(x), -1), axis=1)
    den = np.linalg.norm((x_p - x).reshape(len(x), -1), axis=1)
    ok = den > 0
    return float((num[ok] / den[ok]).max()) if ok.any() else 0.0


def pinsker_check(kl: float, grad_devs) -> tuple[bool, float]:
    """Is ``kl <= mean(grad_dev^2) / 2``?  Returns the verdict and the right-hand side."""
    rhs = 0.5 * float(np.mean(np.square(grad_devs))) if len(grad_devs) else 0.0
    return kl <= rhs, rhs


@dataclass(frozen=True)
class StealthReport:
    kl_global: float
    kl_anchor: float
    ssim_mean: float
    psnr_mean_db: float
    grad_dev_mean: float
    kl_bound_d: float
    kl_bound_d1: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


class StealthAccumulator:
    """Running stealth statistics over every poisoned sample produced in a run."""

    def __init__(self, anchor, bins: int = 256):
        self.anchor = anchor
        self.bins = bins
        self.counts = {k: np.zeros(bins) for k in ("clean", "poison", "clean_a", "poison_a")}
        self.n = 0
        self.ssim_sum = 0.0
        self.psnr_sum = 0.0
        self.linf_max = 0.0

    def add(self, clean: np.ndarray, poisoned: np.ndarray) -> None:
        if not len(clean):
            return
        self.counts["clean"] += intensity_counts(clean, self.bins)
        self.counts["poison"] += intensity_counts(poisoned, self.bins)
        self.counts["clean_a"] += intensity_counts(clean, self.bins, self.anchor)
        self.counts["poison_a"] += intensity_counts(poisoned, self.bins, self.anchor)
        for a, b in zip(clean, poisoned):
            self.ssim_sum += ssim(a, b)
            self.psnr_sum += psnr(a, b)
        self.n += len(clean)
        self.linf_max = max(self.linf_max, float(np.abs(poisoned - clean).max()))

    def kl_global(self) -> float:
        return kl_from_counts(self.counts["poison"], self.counts["clean"]) if self.n else 0.0

    def kl_anchor(self) -> float:
        return kl_from_counts(self.counts["poison_a"], self.counts["clean_a"]) if self.n else 0.0

    def report(self, grad_dev_mean: float = float("nan"), L_delta: float = 1.0,
               input_dim: int = 1) -> StealthReport:
        bound_d, bound_1 = kl_gradient_bound(L_delta, self.linf_max, input_dim)
        n = max(self.n, 1)
        return StealthReport(
            kl_global=self.kl_global(),
            kl_anchor=self.kl_anchor(),
            ssim_mean=self.ssim_sum / n if self.n else 1.0,
            psnr_mean_db=self.psnr_sum / n if self.n else PSNR_CAP_DB,
            grad_dev_mean=grad_dev_mean,
            kl_bound_d=bound_d,
            kl_bound_d1=bound_1,
        )
