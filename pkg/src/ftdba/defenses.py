"""Simplified server-side defenses and robust aggregation rules.

Every defense maps one round's submissions to a :class:`DefenseVerdict`.
Deltas are flat vectors (see :func:`ftdba.model.flatten`), one row per client.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, EmptyRound, InsufficientHistory, TooFewClients, TooFewSamples
from .spectral import detect_harmonic_anomaly, psd_radial

MIN_AUDIT = 16


@dataclass(frozen=True)
class DefenseVerdict:
    flagged_clients: frozenset = frozenset()
    flagged_sample_fraction: dict = field(default_factory=dict)
    weights_override: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "flagged_clients", frozenset(self.flagged_clients))
        if any(not 0.0 <= f <= 1.0 for f in self.flagged_sample_fraction.values()):
            raise ValueError("sample fractions must lie in [0, 1]")
        if self.weights_override is not None and any(w < 0 for w in self.weights_override.values()):
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True, eq=False)
class RoundContext:
    """What the server sees in one round, indexed by position in ``client_ids``."""

    round: int
    client_ids: tuple
    deltas: np.ndarray
    sizes: np.ndarray
    audits: tuple = ()
    history: dict = field(default_factory=dict)


# --- detectors ----------------------------------------------------------------

def defense_spectral(audits: dict, margin_db: float = 3.0, reference: np.ndarray | None = None,
                     max_fraction: float = 0.2) -> DefenseVerdict:
    """Flag clients whose audit batch has more than ``max_fraction`` anomalous samples.

    ``audits`` maps client id to an image batch.  ``reference`` is an
    expected clean 2-D power spectrum; when given, each sample spectrum is
    whitened by it so the median floor tracks the data's own noise floor.
    """
    fractions, flagged = {}, set()
    for cid, batch in audits.items():
        if batch is None or not len(batch):
            raise EmptyDataset(f"client {cid} submitted an empty audit batch")
        if len(batch) < MIN_AUDIT:
            raise TooFewSamples(f"client {cid}: audit batch needs >= {MIN_AUDIT} samples")
        hits = sum(detect_harmonic_anomaly(psd_radial(x, reference), margin_db).flagged for x in batch)
        fractions[cid] = hits / len(batch)
        if fractions[cid] > max_fraction:
            flagged.add(cid)
    return DefenseVerdict(flagged, fractions)


def normalized_deviations(deltas: np.ndarray) -> np.ndarray:
    """Distance of each delta to the coordinate median, after scaling to unit median norm."""
    d = np.asarray(deltas, dtype=float)
    scale = float(np.median(np.linalg.norm(d, axis=1)))
    if scale > 0:
        d = d / scale
    ref = np.median(d, axis=0)
    return np.linalg.norm(d - ref, axis=1)


def defense_norm(deltas: np.ndarray, client_ids=None, threshold: float = 0.15) -> DefenseVerdict:
    """Flag clients whose normalised delta strays more than ``threshold`` from the median."""
    deltas = np.asarray(deltas, dtype=float)
    if len(deltas) < 2:
        raise TooFewClients("norm defense needs at least two clients")
    ids = list(range(len(deltas))) if client_ids is None else list(client_ids)
    dev = normalized_deviations(deltas)
    return DefenseVerdict({c for c, v in zip(ids, dev) if v > threshold})


def foolsgold_weights(history: dict) -> dict:
    """``1 - max cosine similarity`` to any other client, clipped and scaled so the max is 1.

    ``history`` maps client id to a list of past deltas, or to any object
    with a ``total`` vector and a length (the number of rounds summed).
    """
    ids = sorted(history)
    if len(ids) < 2:
        raise TooFewClients("FoolsGold needs at least two clients")
    acc = []
    for c in ids:
        h = history[c]
        if len(h) < 2:
            raise InsufficientHistory(f"client {c} has {len(h)} rounds of history, need 2")
        acc.append(h.total if hasattr(h, "total") else np.sum(h, axis=0))
    a = np.asarray(acc, dtype=float)
    norms = np.linalg.norm(a, axis=1)
    unit = a / np.where(norms > 0, norms, 1.0)[:, None]
    cos = unit @ unit.T
    np.fill_diagonal(cos, -np.inf)
    w = np.clip(1.0 - cos.max(axis=1), 0.0, 1.0)
    if w.max() > 0:
        w = w / w.max()
    return {c: float(v) for c, v in zip(ids, w)}


def defense_foolsgold(history: dict, flag_below: float = 0.5) -> DefenseVerdict:
    """Similarity-based down-weighting; clients weighted below ``flag_below`` count as flagged."""
    w = foolsgold_weights(history)
    return DefenseVerdict({c for c, v in w.items() if v < flag_below}, weights_override=w)


# --- robust aggregation ---------------------------------------------------------

def krum_scores(deltas: np.ndarray, f: int) -> np.ndarray:
    d = np.asarray(deltas, dtype=float)
    m = len(d)
    if m < 2 * f + 3:
        raise TooFewClients(f"Krum needs m >= 2f + 3, got m={m}, f={f}")
    sq = (d * d).sum(axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * d @ d.T, 0.0)
    np.fill_diagonal(dist, np.inf)
    k = m - f - 2
    return np.sort(dist, axis=1)[:, :k].sum(axis=1)


def aggregate_krum(deltas: np.ndarray, f: int) -> tuple[int, np.ndarray]:
    """Index and value of the Krum-selected delta; ties go to the lowest index."""
    scores = krum_scores(deltas, f)
    i = int(np.argmin(scores))
    return i, np.asarray(deltas[i], dtype=float)


def aggregate_median(deltas: np.ndarray) -> np.ndarray:
    """Coordinate-wise median, taking the lower middle value for even counts."""
    d = np.asarray(deltas, dtype=float)
    if not len(d):
        raise EmptyRound("no deltas to aggregate")
    return np.sort(d, axis=0)[(len(d) - 1) // 2]


# --- round-level wrappers used by the simulator ---------------------------------

class SpectralDefense:
    """Per-round spectral audit.  ``enforce=False`` records verdicts without filtering."""

    name = "spectral"

    def __init__(self, reference: np.ndarray | None = None, margin_db: float = 3.0,
                 max_fraction: float = 0.2, enforce: bool = True):
        self.reference = reference
        self.margin_db = margin_db
        self.max_fraction = max_fraction
        self.enforce = enforce

    def __call__(self, ctx: RoundContext) -> DefenseVerdict:
        audits = dict(zip(ctx.client_ids, ctx.audits))
        return defense_spectral(audits, self.margin_db, self.reference, self.max_fraction)


class NormDefense:
    name = "norm"

    def __init__(self, threshold: float = 0.15, enforce: bool = True):
        self.threshold = threshold
        self.enforce = enforce

    def __call__(self, ctx: RoundContext) -> DefenseVerdict:
        return defense_norm(ctx.deltas, ctx.client_ids, self.threshold)


class FoolsGoldDefense:
    name = "foolsgold"

    def __init__(self, flag_below: float = 0.5, enforce: bool = True):
        self.flag_below = flag_below
        self.enforce = enforce

    def __call__(self, ctx: RoundContext) -> DefenseVerdict:
        hist = {c: ctx.history.get(c, []) for c in ctx.client_ids}
        if any(len(h) < 2 for h in hist.values()):
            return DefenseVerdict()
        return defense_foolsgold(hist, self.flag_below)


def detection_rate(records, malicious, monitor: str | None = None) -> float:
    """Fraction of (malicious client, round) pairs flagged, averaged over rounds.

    With ``monitor`` the verdicts come from that named monitor instead of
    the acting defense.
    """
    mal = set(malicious)
    if monitor is not None:
        records = [_MonitorView(dict(r.monitor_flags).get(monitor)) for r in records]
    rows = [r for r in records if r.flags is not None]
    if not rows:
        raise ValueError("no rounds carry defense verdicts")
    if not mal:
        return 0.0
    return float(np.mean([len(set(r.flags) & mal) / len(mal) for r in rows]))


@dataclass(frozen=True)
class _MonitorView:
    flags: frozenset | None
