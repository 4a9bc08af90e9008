"""Closed-form calculators for the attack's theoretical claims.

Every function is pure.  Where the published figures disagree with the
formulas they come from, :func:`theory_table` reports both.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("logit needs p in (0, 1)")
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class TheoryInputs:
    D: float = math.log(4) / math.log(3)
    n: int = 16
    alpha: float = 0.8
    S_global: float = 1.0
    N_i: float = 19.0
    C_i: float = 240.0
    d_decay: float = -0.05
    L_delta: float = 1.0
    delta_inf: float = 0.05
    sigma_t: float = 0.0
    epsilon_spec: float = 0.5
    sigma0: float = 1.0
    asr_target: float = 0.8
    input_dim: int = 1024

    def __post_init__(self):
        if not 1.0 < self.D < 2.0:
            raise ValueError("D must lie in (1, 2)")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.7 <= self.alpha <= 0.9:
            raise ValueError("alpha must lie in [0.7, 0.9]")
        if min(self.N_i, self.C_i, self.input_dim) <= 0:
            raise ValueError("counts must be positive")


def asr_model_dba(strengths, poisons, sizes, d_decay: float = -0.05) -> float:
    """``sigmoid(sum S_i N_i / C_i) + d``, clipped to [0, 1]."""
    if d_decay > 0:
        raise ValueError("d_decay must be <= 0")
    total = sum(s * n / c for s, n, c in zip(strengths, poisons, sizes))
    val = (1.0 if total == math.inf else sigmoid(total)) + d_decay
    return min(1.0, max(0.0, val))


def strength_degradation(S_global: float, n: float, alpha: float) -> float:
    """Upper bound ``S_global / n^alpha`` on a block sub-trigger's strength."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return S_global / n**alpha


def psi(D: float) -> float:
    """Coherence factor ``exp(-(2 - D) / 2)``."""
    if not 0.0 < D <= 2.0:
        raise ValueError("D must lie in (0, 2]")
    return math.exp(-(2.0 - D) / 2.0)


def strength_preservation(S_global: float, n: float, D: float) -> float:
    """Fractal sub-trigger strength ``S_global * (1/n) * psi(D)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return S_global / n * psi(D)


def spectral_masking_bound(epsilon_spec: float, sigma_t: float, sigma0: float) -> float:
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    return epsilon_spec * math.exp(-sigma_t / sigma0)


def gamma_exponent(alpha: float, D: float) -> float:
    return alpha * (1.0 - 1.0 / D)


def sample_ratio(n: float, alpha: float, D: float) -> tuple[float, float]:
    """``N_FTDBA / N_DBA = n^(-alpha (1 - 1/D))`` and its inverse, the amplification."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if D < 1:
        raise ValueError("D must be >= 1")
    gamma = n ** gamma_exponent(alpha, D)
    return 1.0 / gamma, gamma


def kl_theory_bound(L_delta: float, delta_inf: float, sigma_t: float = 0.0,
                    input_dim: int = 1) -> tuple[float, float]:
    """Both KL bound forms: ``L^2 d delta^2 / 2`` and ``L^2 delta^2 / 2``.

    The unquantified ``O(sigma_t^2)`` remainder is not added.
    """
    if min(L_delta, delta_inf, sigma_t) < 0 or input_dim < 1:
        raise ValueError("inputs must be non-negative")
    base = 0.5 * L_delta**2 * delta_inf**2
    return base * input_dim, base


def min_poison_formula(asr_target: float, C: float, S_global: float, n: float, alpha: float,
                       D: float) -> tuple[float, float]:
    """Closed-form ``(N_DBA, N_FTDBA)`` needed to reach ``asr_target``."""
    z = logit(asr_target)
    n_dba = z * C / S_global * n**alpha
    n_ftdba = z * C / (S_global * psi(D)) * n ** (alpha / D)
    return n_dba, n_ftdba


# --- reporting ------------------------------------------------------------------

PAPER_PSI_126 = 0.95
PAPER_GAMMA_EXPONENT = 0.22
PAPER_GAMMA = 2.3
PAPER_SIGMA_MAX = {"stage one description": 0.2 * math.pi, "execution formulas": 0.4 * math.pi}
PAPER_TABLE_RATIO = 1120 / 1795


@dataclass(frozen=True)
class TheoryRow:
    quantity: str
    value: float
    paper: float | None = None
    measured: float | None = None
    note: str = ""


def theory_table(inp: TheoryInputs, measured: dict | None = None, sigma_max: float = 0.4 * math.pi) -> list[TheoryRow]:
    """Formula predictions for ``inp``, published figures where they exist, and annotations."""
    measured = measured or {}
    ratio, gamma = sample_ratio(inp.n, inp.alpha, inp.D)
    n_dba, n_ft = min_poison_formula(inp.asr_target, inp.C_i, inp.S_global, inp.n, inp.alpha, inp.D)
    kl_d, kl_1 = kl_theory_bound(inp.L_delta, inp.delta_inf, inp.sigma_t, inp.input_dim)
    rows = [
        TheoryRow("psi(D)", psi(inp.D)),
        TheoryRow("psi(1.26)", psi(1.26), PAPER_PSI_126,
                  note="formula exp(-(2-D)/2) gives 0.6907; published value 0.95"),
        TheoryRow("strength_degradation", strength_degradation(inp.S_global, inp.n, inp.alpha)),
        TheoryRow("strength_preservation", strength_preservation(inp.S_global, inp.n, inp.D)),
        TheoryRow("gamma_exponent", gamma_exponent(inp.alpha, inp.D), PAPER_GAMMA_EXPONENT,
                  note=f"alpha(1-1/D) = {gamma_exponent(0.8, 1.26):.3f} at alpha=0.8 D=1.26; "
                       f"published exponent 0.22 gives 16^0.22 = {16 ** 0.22:.2f}; published gamma 2.3"),
        TheoryRow("gamma", gamma, PAPER_GAMMA, measured.get("gamma"),
                  note="published gamma, exponent and their evaluation are mutually inconsistent"),
        TheoryRow("sample_ratio", ratio, PAPER_TABLE_RATIO, measured.get("sample_ratio"),
                  note="published value is the empirical table ratio 1120/1795"),
        TheoryRow("sigma_max", sigma_max, PAPER_SIGMA_MAX["execution formulas"],
                  note="stage one text uses 0.2pi; execution formulas use 0.4pi; default follows the latter"),
        TheoryRow("min_poison_dba", n_dba, measured=measured.get("n_block")),
        TheoryRow("min_poison_ftdba", n_ft, measured=measured.get("n_ftdba"),
                  note=f"formula ratio {n_ft / n_dba:.4f} equals sample_ratio only when psi(D) ~ 1"),
        TheoryRow("spectral_masking_bound",
                  spectral_masking_bound(inp.epsilon_spec, inp.sigma_t, inp.sigma0)),
        TheoryRow("kl_bound_d", kl_d, measured=measured.get("kl_global")),
        TheoryRow("kl_bound_d1", kl_1, 0.025,
                  note="published 0.025 matches the d-dependent form only at d=20 with L=1"),
        TheoryRow("asr_model_dba", asr_model_dba([strength_degradation(inp.S_global, inp.n, inp.alpha)] * inp.n,
                                                 [inp.N_i] * inp.n, [inp.C_i] * inp.n, inp.d_decay),
                  measured=measured.get("asr")),
    ]
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6g}"


def theory_csv(rows, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    buf.write("quantity,value,paper,measured,note\n")
    for r in rows:
        note = r.note.replace(",", ";")
        buf.write(f"{r.quantity},{_fmt(r.value)},{_fmt(r.paper)},{_fmt(r.measured)},{note}\n")
    return buf.getvalue()
