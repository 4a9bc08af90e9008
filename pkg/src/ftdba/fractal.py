"""Iterated-function-system triggers: Koch construction, decomposition, perturbation.

Geometries are polylines stored as an ``(N, 2)`` float array in unit-square
coordinates (x to the right, y up).  A row of NaNs is a pen-up marker that
separates strokes; it only appears once angular perturbation breaks the
tiling of the pieces.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import BadGranularity, DepthTooLarge, InsufficientScales

MAX_SEGMENTS = 4**8
_MORAN_TOL = 1e-9


@dataclass(frozen=True)
class AffineMap2:
    """Similarity map ``x -> scale * R(angle) @ x + translation``."""

    scale: float
    angle: float
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.scale < 1.0:
            raise ValueError(f"scale must lie in (0, 1), got {self.scale}")
        if not -math.pi < self.angle <= math.pi:
            raise ValueError(f"angle must lie in (-pi, pi], got {self.angle}")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix.T + np.asarray(self.translation)

    def rotated(self, dtheta: float) -> "AffineMap2":
        return AffineMap2(self.scale, _wrap_angle(self.angle + dtheta), self.translation)


def _wrap_angle(a: float) -> float:
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


def similarity_dimension(scales) -> float:
    """Solve the Moran equation ``sum(s**D) = 1`` for ``D``."""
    s = np.asarray(scales, dtype=float)
    if len(s) == 1:
        return 0.0
    f = lambda d: float(np.sum(s**d)) - 1.0
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    return brentq(f, 0.0, hi, xtol=1e-15, rtol=1e-15)


@dataclass(frozen=True)
class IFSSystem:
    maps: tuple[AffineMap2, ...]
    dimension: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))
        if not self.maps:
            raise ValueError("an IFS needs at least one map")
        if self.dimension is None:
            object.__setattr__(self, "dimension", similarity_dimension(self.scales))
        if abs(self.moran_sum() - 1.0) > _MORAN_TOL:
            raise ValueError(
                f"Moran equation violated: sum s^D = {self.moran_sum()!r} for D={self.dimension}"
            )

    @property
    def scales(self) -> list[float]:
        return [m.scale for m in self.maps]

    def __len__(self) -> int:
        return len(self.maps)

    def moran_sum(self) -> float:
        return float(sum(m.scale**self.dimension for m in self.maps))

    def rotated(self, dtheta: float) -> "IFSSystem":
        """Same system with every map angle offset by ``dtheta``."""
        return IFSSystem(tuple(m.rotated(dtheta) for m in self.maps), self.dimension)


def koch_ifs() -> IFSSystem:
    """The four-map Koch curve system with analytic tiling translations."""
    third = 1.0 / 3.0
    maps = (
        AffineMap2(third, 0.0, (0.0, 0.0)),
        AffineMap2(third, math.pi / 3, (third, 0.0)),
        AffineMap2(third, -math.pi / 3, (0.5, math.sqrt(3) / 6)),
        AffineMap2(third, 0.0, (2 * third, 0.0)),
    )
    return IFSSystem(maps, math.log(4) / math.log(3))


def koch_family_ifs(dimension: float) -> IFSSystem:
    """Four-map Koch-type curve with similarity dimension ``dimension`` in [1, 2).

    All maps share the ratio ``s = 4**(-1/D)``; the bump angle ``a`` solves
    ``2s + 2s cos(a) = 1`` so the four pieces still join end to end.
    ``D = 1`` degenerates to a straight segment and ``D = ln4/ln3`` is the
    classic Koch curve.
    """
    if not 1.0 <= dimension < 2.0:
        raise ValueError(f"dimension must lie in [1, 2), got {dimension}")
    s = 4.0 ** (-1.0 / dimension)
    a = math.acos(min(1.0, max(-1.0, (1.0 - 2.0 * s) / (2.0 * s))))
    apex = (s + s * math.cos(a), s * math.sin(a))
    maps = (
        AffineMap2(s, 0.0, (0.0, 0.0)),
        AffineMap2(s, a, (s, 0.0)),
        AffineMap2(s, -a, apex),
        AffineMap2(s, 0.0, (1.0 - s, 0.0)),
    )
    return IFSSystem(maps, dimension)


@dataclass(frozen=True, eq=False)
class TriggerGeometry:
    """A (sub-)trigger polyline.

    ``word`` addresses the part of the attractor this geometry came from,
    as a string over ``"1".."M"``; the empty string is the global trigger.
    """

    points: np.ndarray
    depth: int
    word: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        finite = pts[~np.isnan(pts).any(axis=1)]
        if finite.size and (finite.min() < -1e-9 or finite.max() > 1 + 1e-9):
            raise ValueError("geometry points must lie in the unit square")

    @property
    def count(self) -> int:
        return len(self.points)

    def strokes(self) -> list[np.ndarray]:
        """Split on pen-up rows into continuous polylines."""
        pts = self.points
        if not len(pts):
            return []
        gap = np.isnan(pts).any(axis=1)
        out, start = [], 0
        for i in np.flatnonzero(gap).tolist() + [len(pts)]:
            if i > start:
                out.append(pts[start:i])
            start = i + 1
        return out

    def segments(self) -> np.ndarray:
        """All drawn segments as an ``(S, 2, 2)`` array."""
        segs = [np.stack([s[:-1], s[1:]], axis=1) for s in self.strokes() if len(s) > 1]
        return np.concatenate(segs) if segs else np.zeros((0, 2, 2))

    def to_text(self) -> str:
        """Plain-text form: header ``word depth count`` then ``x y`` rows.

        The empty (global) word is written as ``-``.
        """
        lines = [f"{self.word or '-'} {self.depth} {self.count}"]
        lines += [f"{x:.9g} {y:.9g}" for x, y in self.points]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TriggerGeometry":
        rows = text.strip().splitlines()
        word, depth, count = rows[0].split()
        pts = np.array([[float(v) for v in r.split()] for r in rows[1:]]).reshape(-1, 2)
        if len(pts) != int(count):
            raise ValueError(f"header says {count} points, found {len(pts)}")
        return cls(pts, int(depth), "" if word == "-" else word)


def _chain(pieces: list[np.ndarray], tol: float = 1e-12) -> np.ndarray:
    """Concatenate polylines, merging coincident joints and inserting pen-ups elsewhere."""
    out = [pieces[0]]
    for p in pieces[1:]:
        prev_end = out[-1][-1]
        if np.all(np.abs(p[0] - prev_end) <= tol):
            out.append(p[1:])
        else:
            out.append(np.full((1, 2), np.nan))
            out.append(p)
    return np.concatenate(out)


def _attractor_points(ifs: IFSSystem, depth: int) -> np.ndarray:
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    for _ in range(depth):
        pts = _chain([m(pts) for m in ifs.maps])
    return pts


def _apply_word(ifs: IFSSystem, word: str, points: np.ndarray) -> np.ndarray:
    # phi_w = phi_{w1} o phi_{w2} o ... ; innermost map applied first
    for ch in reversed(word):
        points = ifs.maps[int(ch) - 1](points)
    return points


def generate_attractor(ifs: IFSSystem, depth: int, max_segments: int = MAX_SEGMENTS) -> TriggerGeometry:
    """Deterministic depth-``depth`` polyline of the IFS applied to the unit segment."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if len(ifs) ** depth > max_segments:
        raise DepthTooLarge(f"{len(ifs)}^{depth} segments exceeds budget {max_segments}")
    return TriggerGeometry(_clean(_attractor_points(ifs, depth)), depth, "")


def _clean(points: np.ndarray) -> np.ndarray:
    # flush float dust such as -1e-17 onto the square's boundary
    return np.where(np.abs(points) < 1e-12, 0.0, points)


def words_of_length(m: int, k: int) -> list[str]:
    return ["".join(str(i + 1) for i in w) for w in itertools.product(range(m), repeat=k)]


def _log_base(n: int, m: int) -> int | None:
    k, v = 0, 1
    while v < n:
        v *= m
        k += 1
    return k if v == n else None


def decompose(ifs: IFSSystem, geometry: TriggerGeometry, n: int) -> list[TriggerGeometry]:
    """Split the global trigger into ``n`` self-similar parts, in polyline order."""
    if geometry.word:
        raise ValueError("decompose expects the global geometry (empty word)")
    k = _log_base(n, len(ifs)) if n >= 1 else None
    if k is None:
        raise BadGranularity(f"n={n} is not a power of {len(ifs)}")
    return [
        TriggerGeometry(_clean(_apply_word(ifs, w, geometry.points)), geometry.depth, w)
        for w in words_of_length(len(ifs), k)
    ]


def normalize_into_unit(points: np.ndarray, always: bool = False) -> np.ndarray:
    """Uniform bounding-box rescale into the unit square.

    Without ``always`` the points are returned untouched when they already fit.
    """
    finite = ~np.isnan(points).any(axis=1)
    if not finite.any():
        return points
    lo = points[finite].min(axis=0)
    hi = points[finite].max(axis=0)
    if not always and lo.min() >= 0.0 and hi.max() <= 1.0:
        return points
    span = float((hi - lo).max()) or 1.0
    return np.clip((points - lo) / span, 0.0, 1.0)


def perturbed_sub_trigger(ifs: IFSSystem, word: str, dtheta: float, depth: int = 4) -> TriggerGeometry:
    """Sub-trigger ``word`` regenerated with every map angle offset by ``dtheta``.

    The outer level of the attractor is rebuilt with the rotated maps around
    the unperturbed depth-``depth - 1`` curve, and the word's own maps are the
    rotated ones too.  Points leaving the unit square trigger a bounding-box
    rescale.
    """
    if abs(dtheta) > math.pi:
        raise ValueError(f"|dtheta| must be <= pi, got {dtheta}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if len(ifs) ** depth > MAX_SEGMENTS:
        raise DepthTooLarge(f"{len(ifs)}^{depth} segments exceeds budget {MAX_SEGMENTS}")
    pert = ifs.rotated(dtheta) if dtheta else ifs
    inner = _attractor_points(ifs, depth - 1)
    outer = _clean(_chain([m(inner) for m in pert.maps]))
    pts = _clean(_apply_word(pert, word, outer)) if word else outer
    return TriggerGeometry(normalize_into_unit(pts), depth, word, {"dtheta": float(dtheta)})


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.spatial import cKDTree

    a = a[~np.isnan(a).any(axis=1)]
    b = b[~np.isnan(b).any(axis=1)]
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def densify(geometry: TriggerGeometry, spacing: float) -> np.ndarray:
    """Points sampled along every segment no further than ``spacing`` apart."""
    segs = geometry.segments()
    if not len(segs):
        pts = geometry.points
        return pts[~np.isnan(pts).any(axis=1)]
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    steps = np.maximum(1, np.ceil(lengths / spacing).astype(int))
    out = [segs[:, 0]]
    for k in np.unique(steps):
        sel = segs[steps == k]
        f = (np.arange(1, k + 1) / k)[None, :, None]
        out.append((sel[:, None, 0] + f * (sel[:, None, 1] - sel[:, None, 0])).reshape(-1, 2))
    return np.concatenate(out)


def box_counting_dimension(geometry: TriggerGeometry, scales) -> float:
    """Least-squares slope of ``log N(eps)`` against ``log(1/eps)``."""
    eps = np.sort(np.asarray(scales, dtype=float))
    if len(eps) < 4 or eps[-1] / eps[0] < 4.0:
        raise InsufficientScales("need >= 4 box sizes spanning >= 2 octaves")
    pts = densify(geometry, eps[0] / 4)
    # boxes tile the unit square, so points on its far edge belong to the last box
    counts = [len(np.unique(np.minimum(np.floor(pts / e), math.ceil(1.0 / e) - 1).astype(np.int64), axis=0))
              for e in eps]
    slope, _ = np.polyfit(np.log(1.0 / eps), np.log(counts), 1)
    return float(slope)
