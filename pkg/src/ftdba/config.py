"""Flat key-value experiment configuration.

Files are INI-style ``key = value`` lines, optionally under a single
``[experiment]`` section.  Angles use a ``_pi`` suffix and are written as
multiples of pi (``sigma_max_pi = 0.4``).  Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .fedsim import FedConfig
from .fractal import IFSSystem, koch_family_ifs, koch_ifs
from .raster import EmbedConfig
from .schedule import ScheduleParams
from .theory import TheoryInputs

KINDS = ("single", "sweep_D", "sweep_lambda", "sweep_N", "ablation_stages", "min_poison", "theory_table")
DEFENSES = ("none", "spectral", "norm", "foolsgold")
AGGREGATORS = ("fedavg", "krum", "median")
KOCH_D = math.log(4) / math.log(3)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "single"
    output_dir: str = ""
    # federation
    num_clients: int = 20
    malicious_ratio: float = 0.1
    rounds: int = 60
    clients_per_round: int = 0
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lambda_poison: float = 10.0
    poison_per_client: int = -1
    poison_fraction: float = 0.08
    target_label: int = 0
    decomposition_n: int = 16
    seed: int = 0
    n_seeds: int = 3
    classes: int = 10
    per_class: int = 600
    side: int = 32
    hidden: int = 128
    trigger: str = "fractal"
    # fractal and schedule
    fractal_dimension: float = KOCH_D
    schedule_mode: str = "three_stage"
    sigma_max_pi: float = 0.4
    sigma_min_mid_pi: float = 0.1
    sigma_final_pi: float = 0.05
    eta_pi: float = 0.1
    fixed_sigma_pi: float = 0.2
    tau_frac: float = 0.2
    t1_frac: float = 0.3
    t2_frac: float = 0.7
    # embedding
    alpha: float = 0.3
    mask_mode: str = "curve"
    strength: str = "constrained"
    epsilon: float = 0.05
    side_frac: float = 0.12
    layout: str = "fit"
    depth: int = 4
    supersample: int = 1
    # defenses
    defense: str = "none"
    defense_enforce: bool = False
    aggregator: str = "fedavg"
    margin_db: float = 3.0
    norm_threshold: float = 0.15
    # theory
    alpha_decay: float = 0.8
    d_decay: float = -0.05
    sigma0: float = 1.0
    epsilon_spec: float = 0.5
    L_delta: float = 1.0
    asr_target: float = 0.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        # build the derived objects once so bad values fail at load time
        try:
            self.fed()
            self.schedule()
            self.embed()
            self.ifs()
            self.theory_inputs(240, 19)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from exc

    # --- derived objects ----------------------------------------------------------

    def fed(self, **overrides) -> FedConfig:
        base = dict(
            num_clients=self.num_clients, malicious_ratio=self.malicious_ratio, rounds=self.rounds,
            clients_per_round=self.clients_per_round or None, local_epochs=self.local_epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate, momentum=self.momentum,
            lambda_poison=self.lambda_poison,
            poison_per_client=None if self.poison_per_client < 0 else self.poison_per_client,
            poison_fraction=self.poison_fraction, target_label=self.target_label,
            decomposition_n=self.decomposition_n, seed=self.seed, classes=self.classes,
            per_class=self.per_class, side=self.side, hidden=self.hidden, trigger=self.trigger,
        )
        base.update(overrides)
        return FedConfig(**base)

    def schedule(self, rounds: int | None = None, mode: str | None = None) -> ScheduleParams:
        t = rounds or self.rounds
        return ScheduleParams(
            sigma_max=self.sigma_max_pi * math.pi, sigma_min_mid=self.sigma_min_mid_pi * math.pi,
            sigma_final=self.sigma_final_pi * math.pi, tau=self.tau_frac * t, eta=self.eta_pi * math.pi,
            t1=self.t1_frac * t, t2=self.t2_frac * t, total_rounds=t,
            mode=mode or self.schedule_mode, fixed_sigma=self.fixed_sigma_pi * math.pi,
        )

    def embed(self) -> EmbedConfig:
        return EmbedConfig(alpha=self.alpha, mode=self.mask_mode, strength=self.strength,
                           epsilon=self.epsilon, side_frac=self.side_frac, layout=self.layout,
                           depth=self.depth, supersample=self.supersample)

    def ifs(self, dimension: float | None = None) -> IFSSystem:
        d = self.fractal_dimension if dimension is None else dimension
        if abs(d - KOCH_D) < 1e-12:
            return koch_ifs()
        return koch_family_ifs(d)

    def theory_inputs(self, shard_size: int, poison: float) -> TheoryInputs:
        d = self.fractal_dimension
        return TheoryInputs(D=d if 1.0 < d < 2.0 else KOCH_D, n=self.decomposition_n,
                            alpha=self.alpha_decay, N_i=max(poison, 1e-9), C_i=shard_size,
                            d_decay=self.d_decay, L_delta=self.L_delta, delta_inf=self.epsilon,
                            sigma_t=0.0, epsilon_spec=self.epsilon_spec, sigma0=self.sigma0,
                            asr_target=self.asr_target, input_dim=self.side * self.side)

    # --- text form ----------------------------------------------------------------

    def to_ini(self) -> str:
        lines = ["[experiment]"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; keys may sit at top level or under ``[experiment]``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    body = text if text.lstrip().startswith("[") else "[experiment]\n" + text
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    extra = [s for s in cp.sections() if s != "experiment"]
    if extra:
        raise ConfigError(f"unknown sections: {extra}")
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _parse(key, types[key], raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
