"""Power spectra of triggers and images, harmonic detection, spectral entropy."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProfile, ZeroSpectrum
from .fractal import TriggerGeometry


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    """Binned power.  Bin 0 is DC and is ignored by peak and entropy analysis."""

    freqs: np.ndarray
    power: np.ndarray
    kind: str = "radial"
    total_power: float = field(default=float("nan"))

    def __post_init__(self):
        if np.any(self.power < 0):
            raise ValueError("power must be non-negative")
        if np.any(np.diff(self.freqs) <= 0):
            raise ValueError("frequency bins must be ascending")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin,freq,power\n")
        for i, (f, p) in enumerate(zip(self.freqs, self.power)):
            buf.write(f"{i},{f:.9g},{p:.9g}\n")
        return buf.getvalue()


def _gray(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=float)
    return x.mean(axis=-1) if x.ndim == 3 else x


def psd2d(image: np.ndarray) -> np.ndarray:
    """Periodogram ``|FFT|^2 / n_pixels`` with DC at index ``[0, 0]``."""
    x = _gray(image)
    return np.abs(np.fft.fft2(x)) ** 2 / x.size


def radial_bins(shape: tuple[int, int]) -> np.ndarray:
    """Integer-radius annulus index of every 2-D frequency (unshifted layout)."""
    h, w = shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    return np.rint(np.hypot(fy[:, None], fx[None, :])).astype(int)


def radial_average(power2d: np.ndarray, nbins: int | None = None) -> np.ndarray:
    h, w = power2d.shape
    nbins = nbins or min(h, w) // 2
    r = radial_bins((h, w))
    keep = r < nbins
    sums = np.bincount(r[keep], weights=power2d[keep], minlength=nbins)
    counts = np.bincount(r[keep], minlength=nbins)
    return sums / np.maximum(counts, 1)


def psd_radial(image: np.ndarray, reference: np.ndarray | None = None) -> PowerSpectrum:
    """Radially averaged power spectrum in ``side // 2`` integer-radius bins.

    With ``reference`` (a 2-D expected-power array from :func:`mean_psd2d`)
    the periodogram is divided by it before averaging, flattening the
    spectrum of whatever the reference set looks like.
    """
    x = _gray(image)
    if min(x.shape) < 8:
        raise ValueError("spectrum needs a side of at least 8 pixels")
    p2 = psd2d(x)
    total = float(p2.sum() - p2[0, 0])
    if reference is not None:
        p2 = p2 / np.maximum(reference, 1e-30)
    nbins = min(x.shape) // 2
    freqs = np.arange(nbins) / min(x.shape)
    return PowerSpectrum(freqs, radial_average(p2, nbins), "radial", total)


def mean_psd2d(images: np.ndarray) -> np.ndarray:
    """Average periodogram of an image stack (used as a whitening reference)."""
    imgs = np.asarray(images, dtype=float)
    return (np.abs(np.fft.fft2(imgs, axes=(-2, -1))) ** 2).mean(axis=0) / imgs[0].size


def height_profile(geometry: TriggerGeometry, samples: int = 4096) -> np.ndarray:
    """Upper envelope ``y(x)`` of the curve on a periodic grid over its x-extent.

    Grid point ``j`` sits at ``x0 + j (x1 - x0) / samples``; each segment
    contributes its linearly interpolated height at every grid point it
    spans.  Koch curves beyond depth 1 fold back on themselves in x, so the
    profile is the upper envelope rather than a strict graph.
    """
    segs = geometry.segments()
    if not len(segs):
        raise DegenerateProfile("geometry has no extent")
    x0, x1 = segs[..., 0].min(), segs[..., 0].max()
    if x1 - x0 < 1e-12:
        raise DegenerateProfile("curve has zero horizontal extent")
    dx = (x1 - x0) / samples
    a, b = segs[:, 0], segs[:, 1]
    xa, xb = np.minimum(a[:, 0], b[:, 0]), np.maximum(a[:, 0], b[:, 0])
    lo = np.clip(np.ceil((xa - x0) / dx - 1e-9), 0, samples - 1).astype(int)
    hi = np.clip(np.floor((xb - x0) / dx + 1e-9), 0, samples - 1).astype(int)
    n = np.maximum(hi - lo + 1, 0)
    seg = np.repeat(np.arange(len(segs)), n)
    start = np.repeat(np.cumsum(n) - n, n)
    idx = np.repeat(lo, n) + np.arange(n.sum()) - start
    gx = x0 + idx * dx
    run = b[seg, 0] - a[seg, 0]
    steep = np.abs(run) < 1e-15
    t = np.clip((gx - a[seg, 0]) / np.where(steep, 1.0, run), 0.0, 1.0)
    y = np.where(steep, np.maximum(a[seg, 1], b[seg, 1]), a[seg, 1] + t * (b[seg, 1] - a[seg, 1]))
    prof = np.full(samples, -np.inf)
    np.maximum.at(prof, idx, y)
    if np.isinf(prof).any():
        raise DegenerateProfile("curve leaves gaps in x; not a height profile")
    return prof


@dataclass(frozen=True, eq=False)
class HarmonicFit:
    magnitudes: np.ndarray  # |c_k| for k = 1..k_max
    slope: float


def harmonic_coefficients(geometry: TriggerGeometry, k_max: int, samples: int = 4096) -> HarmonicFit:
    """Fourier-series magnitudes of the height profile, fundamental = curve width.

    The attached slope is the least-squares fit of ``log |c_k|`` on ``log k``
    over the non-vanishing coefficients.
    """
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    prof = height_profile(geometry, samples)
    c = np.fft.rfft(prof) / samples
    mags = np.abs(c[1:k_max + 1])
    scale = max(np.abs(prof).max(), 1e-300)
    ok = mags > 1e-9 * scale
    slope = float("nan")
    if ok.sum() >= 2:
        k = np.arange(1, k_max + 1)[ok]
        slope = float(np.polyfit(np.log(k), np.log(mags[ok]), 1)[0])
    return HarmonicFit(mags, slope)


def suppression_factor(k: float, sigma: float) -> float:
    """Modelled harmonic power ratio ``exp(-k^2 sigma^2)`` under Gaussian phase noise."""
    if k < 0 or sigma < 0:
        raise ValueError("k and sigma must be non-negative")
    return float(np.exp(-(k**2) * sigma**2))


def phase_randomization_mc(k: float, sigma: float, n: int, rng: np.random.Generator) -> float:
    """Monte-Carlo ``|mean(exp(i k dtheta))|^2`` for Gaussian ``dtheta``."""
    dtheta = rng.normal(0.0, sigma, size=n)
    return float(np.abs(np.exp(1j * k * dtheta).mean()) ** 2)


@dataclass(frozen=True)
class HarmonicVerdict:
    flagged: bool
    peaks: tuple[int, ...]
    floor: float


def detect_harmonic_anomaly(spectrum: PowerSpectrum, margin_db: float = 3.0) -> HarmonicVerdict:
    """Flag bins whose power exceeds the median non-DC power by ``margin_db``."""
    if margin_db <= 0:
        raise ValueError("margin_db must be positive")
    p = spectrum.power[1:]
    if not len(p):
        return HarmonicVerdict(False, (), 0.0)
    floor = float(np.median(p))
    # round-off dust below 1e-12 of the strongest bin never counts as a harmonic
    thresh = max(floor * 10 ** (margin_db / 10), 1e-12 * float(p.max()))
    peaks = tuple(int(i) + 1 for i in np.flatnonzero(p > thresh))
    return HarmonicVerdict(bool(peaks), peaks, floor)


def spectral_entropy(spectrum: PowerSpectrum) -> float:
    """Shannon entropy (bits) of the normalised non-DC power distribution."""
    p = spectrum.power[1:]
    total = p.sum()
    if total <= 0:
        raise ZeroSpectrum("no non-DC power")
    q = p[p > 0] / total
    return float(-(q * np.log2(q)).sum())
