"""Federated averaging with benign and trigger-poisoning clients.

Every random draw comes from :func:`ftdba.schedule.stream` keyed by
``(seed, round, client, purpose)``, so a run is reproducible from its seed
and does not depend on the order clients are visited in.
"""
from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .data import Dataset, make_synthetic_dataset
from .defenses import RoundContext, aggregate_krum, aggregate_median
from .errors import (ConfigError, EmptyRound, NonFiniteGradient, TargetUnreachable,
                     TooFewSamples)
from .fractal import (IFSSystem, TriggerGeometry, generate_attractor, koch_ifs,
                      normalize_into_unit, perturbed_sub_trigger, words_of_length)
from .raster import EmbedConfig, TriggerPatch, write_tensors
from .schedule import ScheduleParams, sample_dtheta, sigma_at, stream
from .stealth import StealthAccumulator, StealthReport, gradient_deviation

# stream purposes; 0 is the angular draw made inside schedule.sample_dtheta
PURPOSE_POISON = 1
PURPOSE_SHUFFLE = 2
PURPOSE_SELECT = 3
PURPOSE_INIT = 4
PURPOSE_PARTITION = 5

TRIGGERS = ("fractal", "block")


@dataclass(frozen=True)
class FedConfig:
    """Federated run settings.

    ``poison_per_client`` fixes N_i; when ``None`` it is
    ``round(poison_fraction * C_i)``.  ``trigger="block"`` swaps the fractal
    sub-triggers for square tiles of a solid patch (the block-DBA baseline).
    """

    num_clients: int = 20
    malicious_ratio: float = 0.1
    rounds: int = 60
    clients_per_round: int | None = None
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lambda_poison: float = 10.0
    poison_per_client: int | None = None
    poison_fraction: float = 0.08
    target_label: int = 0
    decomposition_n: int = 16
    seed: int = 0
    classes: int = 10
    per_class: int = 600
    side: int = 32
    hidden: int = 128
    trigger: str = "fractal"

    def __post_init__(self):
        if self.num_clients < 2:
            raise ConfigError("need at least two clients")
        if not 0.0 <= self.malicious_ratio < 0.5:
            raise ConfigError("malicious_ratio must lie in [0, 0.5)")
        # zero is allowed so a lambda sweep can include its no-poison point
        if self.lambda_poison < 0:
            raise ConfigError("lambda_poison must be non-negative")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be positive")
        if self.clients_per_round is not None and not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("clients_per_round must lie in [1, num_clients]")
        if not 0 <= self.target_label < self.classes:
            raise ConfigError("target_label must be a valid class")
        if self.trigger not in TRIGGERS:
            raise ConfigError(f"trigger must be one of {TRIGGERS}")
        if self.poison_per_client is not None and self.poison_per_client < 0:
            raise ConfigError("poison_per_client must be non-negative")

    @property
    def num_malicious(self) -> int:
        return math.ceil(round(self.malicious_ratio * self.num_clients, 9))

    def poison_count(self, shard_size: int) -> int:
        n = (self.poison_per_client if self.poison_per_client is not None
             else int(round(self.poison_fraction * shard_size)))
        if n > shard_size:
            raise ConfigError(f"poison_per_client {n} exceeds shard size {shard_size}")
        return n


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    is_malicious: bool = False
    words: tuple = ()
    poison_count: int = 0

    def __post_init__(self):
        if self.is_malicious and not self.words:
            raise ValueError("a malicious shard needs at least one sub-trigger word")
        if self.poison_count > len(self.y):
            raise ValueError("poison_count exceeds shard size")

    @property
    def assigned_word(self) -> str:
        return self.words[0] if self.words else ""

    @property
    def size(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    clean_accuracy: float
    asr: float
    sigma_t: float
    train_loss: float
    update_norms: tuple
    flags: frozenset | None = None
    monitor_flags: tuple = ()

    def __post_init__(self):
        for v in (self.clean_accuracy, self.asr):
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracy and ASR must lie in [0, 1]")


CSV_HEADER = "round,clean_acc,asr,sigma_t,flagged_clients"


def records_to_csv(records, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    buf.write(CSV_HEADER + "\n")
    for r in records:
        flags = ";".join(str(c) for c in sorted(r.flags)) if r.flags else ""
        buf.write(f"{r.round},{r.clean_accuracy:.6f},{r.asr:.6f},{r.sigma_t:.6f},{flags}\n")
    return buf.getvalue()


@functools.lru_cache(maxsize=8)
def cached_dataset(classes: int, per_class: int, side: int, seed: int) -> Dataset:
    return make_synthetic_dataset(classes, per_class, side, seed=seed)


def dataset_for(config: FedConfig) -> Dataset:
    return cached_dataset(config.classes, config.per_class, config.side, config.seed)


def _server(config: FedConfig) -> int:
    return config.num_clients


def partition_clients(dataset: Dataset, config: FedConfig) -> list[ClientShard]:
    """IID split into ``num_clients`` shards; the first ``ceil(rho K)`` are malicious.

    Sub-trigger words go round-robin: malicious client ``j`` holds parts
    ``j, j + m, j + 2m, ...`` of the ``decomposition_n`` parts.
    """
    n = len(dataset.y_train)
    k = config.num_clients
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} shards")
    perm = stream(config.seed, 0, _server(config), PURPOSE_PARTITION).permutation(n)
    words = part_words(config.decomposition_n)
    m = config.num_malicious
    shards = []
    for cid, idx in enumerate(np.array_split(perm, k)):
        mal = cid < m
        shards.append(ClientShard(
            cid, dataset.x_train[idx], dataset.y_train[idx], mal,
            tuple(words[cid::m]) if mal else (),
            config.poison_count(len(idx)) if mal else 0,
        ))
    return shards


def part_words(n: int, maps: int = 4) -> list[str]:
    k = round(math.log(n, maps)) if n >= 1 else -1
    if k < 0 or maps**k != n:
        raise ConfigError(f"decomposition_n={n} is not a power of {maps}")
    return words_of_length(maps, k)


class TriggerKit:
    """Renders the global trigger and per-client sub-trigger patches."""

    def __init__(self, ifs: IFSSystem, embed: EmbedConfig, height: int, width: int,
                 n: int = 16, kind: str = "fractal"):
        if kind not in TRIGGERS:
            raise ConfigError(f"trigger must be one of {TRIGGERS}")
        self.ifs, self.embed, self.kind, self.n = ifs, embed, kind, n
        self.mask = embed.blend_mask(height, width)
        self.side = self.mask.anchor[2]
        self.words = part_words(n, len(ifs))
        self._cache: dict = {}

    def global_patch(self) -> TriggerPatch:
        if self.kind == "block":
            return TriggerPatch(np.ones((self.side, self.side)), np.ones((self.side, self.side), bool))
        if "global" not in self._cache:
            self._cache["global"] = self.embed.render(generate_attractor(self.ifs, self.embed.depth), self.side)
        return self._cache["global"]

    def tile_bounds(self, part: int) -> tuple[int, int, int, int]:
        g = math.isqrt(self.n)
        if g * g != self.n:
            raise ConfigError("block tiles need a square decomposition_n")
        step = self.side / g
        r, c = divmod(part, g)
        return (int(round(r * step)), int(round((r + 1) * step)),
                int(round(c * step)), int(round((c + 1) * step)))

    def sub_patch(self, word: str, dtheta: float = 0.0) -> TriggerPatch:
        key = (word, float(dtheta))
        if key in self._cache:
            return self._cache[key]
        if self.kind == "block":
            r0, r1, c0, c1 = self.tile_bounds(self.words.index(word))
            data = np.zeros((self.side, self.side))
            data[r0:r1, c0:c1] = 1.0
            patch = TriggerPatch(data, data > 0)
        else:
            geo = perturbed_sub_trigger(self.ifs, word, dtheta, self.embed.depth)
            if self.embed.layout == "fit":
                geo = TriggerGeometry(normalize_into_unit(geo.points, always=True), geo.depth, word, geo.meta)
            patch = self.embed.render(geo, self.side)
        self._cache[key] = patch
        return patch


@dataclass(frozen=True, eq=False)
class PoisonSet:
    clean: np.ndarray
    poisoned: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    dtheta: float = 0.0

    def __len__(self) -> int:
        return len(self.labels)


def build_poison_set(shard: ClientShard, t: int, config: FedConfig, schedule: ScheduleParams,
                     kit: TriggerKit) -> PoisonSet:
    """Round-``t`` poisoned samples for one malicious client.

    Picks ``poison_count`` shard images, draws this client's angular offset,
    and stamps sample ``j`` with the client's word ``j mod len(words)``.
    """
    n = shard.poison_count
    empty = np.zeros((0,) + shard.x.shape[1:])
    if not shard.is_malicious or n == 0:
        return PoisonSet(empty, empty, np.zeros(0, int), np.zeros(0, int))
    rng = stream(config.seed, t, shard.client_id, PURPOSE_POISON)
    pick = rng.choice(shard.size, n, replace=False)
    dtheta = sample_dtheta(schedule, t, config.seed, shard.client_id).dtheta if kit.kind == "fractal" else 0.0
    clean = shard.x[pick]
    poisoned = np.empty_like(clean)
    word_of = np.arange(n) % len(shard.words)
    for w in np.unique(word_of):
        sel = word_of == w
        poisoned[sel] = kit.embed.apply(clean[sel], kit.sub_patch(shard.words[w], dtheta))
    if kit.embed.strength == "constrained":
        worst = float(np.abs(poisoned - clean).max())
        if worst > kit.embed.epsilon + 1e-12:
            raise AssertionError(f"poisoned residual {worst} exceeds epsilon {kit.embed.epsilon}")
    return PoisonSet(clean, poisoned, np.full(n, config.target_label), shard.y[pick], dtheta)


def combined_gradient(params: dict, x: np.ndarray, y: np.ndarray, xp: np.ndarray, yp: np.ndarray,
                      lam: float):
    """Malicious minibatch gradient ``g_clean + lam * g_poison`` and its two parts."""
    _, g_clean = M.loss_and_grads(params, x, y)
    if lam == 0 or not len(yp):
        zero = {k: np.zeros_like(v) for k, v in g_clean.items()}
        return dict(g_clean), g_clean, zero
    _, g_poison = M.loss_and_grads(params, xp, yp)
    total = {k: g_clean[k] + lam * g_poison[k] for k in g_clean}
    return total, g_clean, g_poison


@dataclass(frozen=True, eq=False)
class LocalResult:
    delta: dict
    audit: np.ndarray
    poison: PoisonSet | None


def local_update(params: dict, shard: ClientShard, t: int, config: FedConfig,
                 schedule: ScheduleParams, kit: TriggerKit, lambda_poison: float | None = None,
                 poison: PoisonSet | None = None) -> LocalResult:
    """SGD with momentum over the shard; malicious clients add the weighted poison term.

    Each step of a malicious client uses the clean minibatch gradient plus
    ``lambda_poison`` times the gradient on the next ``min(batch, N)``
    poisoned samples (cycled).  The audit batch is the last step's inputs.
    """
    lam = config.lambda_poison if lambda_poison is None else lambda_poison
    if shard.is_malicious and poison is None:
        poison = build_poison_set(shard, t, config, schedule, kit)
    use_poison = shard.is_malicious and poison is not None and len(poison) > 0
    p = {k: params[k].copy() for k in M.PARAM_KEYS}
    p["x_mean"], p["x_scale"] = params["x_mean"], params["x_scale"]
    vel = {k: np.zeros_like(p[k]) for k in M.PARAM_KEYS}
    rng = stream(config.seed, t, shard.client_id, PURPOSE_SHUFFLE)
    order = np.concatenate([rng.permutation(shard.size) for _ in range(config.local_epochs)])
    bs = config.batch_size
    cursor = 0
    last_poison = np.zeros((0,) + shard.x.shape[1:])
    for s in range(0, len(order), bs):
        b = order[s:s + bs]
        if use_poison:
            nb = min(bs, len(poison))
            sel = np.arange(cursor, cursor + nb) % len(poison)
            cursor += nb
            g, _, _ = combined_gradient(p, shard.x[b], shard.y[b], poison.poisoned[sel], poison.labels[sel], lam)
            last_poison = poison.poisoned[sel]
        else:
            _, g = M.loss_and_grads(p, shard.x[b], shard.y[b])
        if not all(np.isfinite(v).all() for v in g.values()):
            raise NonFiniteGradient(shard.client_id)
        for k in M.PARAM_KEYS:
            vel[k] = config.momentum * vel[k] + g[k]
            p[k] = p[k] - config.learning_rate * vel[k]
    delta = {k: p[k] - params[k] for k in M.PARAM_KEYS}
    if not all(np.isfinite(v).all() for v in delta.values()):
        raise NonFiniteGradient(shard.client_id)
    audit = np.concatenate([shard.x[order[-bs:]], last_poison])
    return LocalResult(delta, audit, poison if shard.is_malicious else None)


def aggregate_fedavg(deltas, weights) -> np.ndarray:
    """Size-weighted mean of flat deltas."""
    d = np.asarray(deltas, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not len(d):
        raise EmptyRound("no deltas to aggregate")
    if len(w) != len(d) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per delta, with positive sum")
    return (w[:, None] * d).sum(axis=0) / w.sum()


def evaluate_asr(params: dict, x_test: np.ndarray, y_test: np.ndarray, trigger_apply,
                 target: int) -> float:
    """Fraction of non-target test images sent to ``target`` once triggered."""
    keep = y_test != target
    if not keep.any():
        return float("nan")
    return float(np.mean(M.predict(params, trigger_apply(x_test[keep])) == target))


def wire_bytes(delta: dict) -> int:
    """Bytes a delta occupies on the simulated wire (float32 payload)."""
    return 4 * sum(delta[k].size for k in M.PARAM_KEYS)


@dataclass(eq=False)
class RunResult:
    config: FedConfig
    records: list
    params: dict
    malicious: tuple
    stealth: StealthReport
    wire_bytes: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def save_checkpoint(self, path) -> None:
        write_tensors(path, [self.params[k] for k in (*M.PARAM_KEYS, "x_mean", "x_scale")])


def _select_clients(config: FedConfig, t: int) -> list[int]:
    k = config.num_clients
    if config.clients_per_round is None or config.clients_per_round == k:
        return list(range(k))
    rng = stream(config.seed, t, _server(config), PURPOSE_SELECT)
    return sorted(int(c) for c in rng.choice(k, config.clients_per_round, replace=False))


def _aggregate(flat: np.ndarray, sizes: np.ndarray, aggregator: str, krum_f: int) -> np.ndarray:
    if aggregator == "fedavg":
        return aggregate_fedavg(flat, sizes)
    if aggregator == "median":
        return aggregate_median(flat)
    if aggregator == "krum":
        return aggregate_krum(flat, krum_f)[1]
    raise ConfigError(f"unknown aggregator {aggregator!r}")


def run_attack(config: FedConfig, schedule: ScheduleParams | None = None, ifs: IFSSystem | None = None,
               embed: EmbedConfig | None = None, defense=None, aggregator: str = "fedavg",
               krum_f: int | None = None, grad_dev_pairs: int = 64, monitors: dict | None = None) -> RunResult:
    """Run ``config.rounds`` rounds of poisoned federated averaging.

    Per round: pick clients, let malicious ones draw their angular offset and
    rebuild their poison set, run local updates, consult the defense (if
    any), aggregate, then evaluate clean accuracy and ASR with the full
    unperturbed trigger.  A defense with ``enforce=True`` drops flagged
    clients and applies any weight override; otherwise it only records.
    ``monitors`` maps names to extra defenses whose verdicts are recorded
    in ``RoundRecord.monitor_flags`` but never acted on.
    """
    schedule = schedule or ScheduleParams.for_rounds(config.rounds)
    if schedule.total_rounds != config.rounds:
        raise ConfigError("schedule length must match config.rounds")
    ifs = ifs or koch_ifs()
    embed = embed or EmbedConfig()
    ds = dataset_for(config)
    h, w = ds.x_train.shape[-2:]
    kit = TriggerKit(ifs, embed, h, w, config.decomposition_n, config.trigger)
    shards = partition_clients(ds, config)
    malicious = tuple(s.client_id for s in shards if s.is_malicious)
    mu, sc = M.input_stats(ds.x_train)
    params = M.init_params(ds.input_dim, config.classes, config.hidden,
                           seed=[config.seed, 0, _server(config), PURPOSE_INIT], x_mean=mu, x_scale=sc)
    gpatch = kit.global_patch()
    apply_global = lambda x: embed.apply(x, gpatch)
    keep = ds.y_test != config.target_label
    x_trig = apply_global(ds.x_test[keep])
    acc = StealthAccumulator(kit.mask.anchor)
    krum_f = config.num_malicious if krum_f is None else krum_f
    history: dict = {}
    records, byte_log = [], {}
    last_pairs = []
    for t in range(1, config.rounds + 1):
        chosen = _select_clients(config, t)
        results = [local_update(params, shards[c], t, config, schedule, kit) for c in chosen]
        flat = np.stack([M.flatten(r.delta) for r in results])
        sizes = np.array([shards[c].size for c in chosen], dtype=float)
        sent = {c: wire_bytes(r.delta) for c, r in zip(chosen, results)}
        if len(set(sent.values())) != 1:
            raise AssertionError(f"unequal wire sizes {sent}")
        byte_log[t] = sent
        for c, r in zip(chosen, results):
            if r.poison is not None and len(r.poison):
                acc.add(r.poison.clean, r.poison.poisoned)
                last_pairs = [r.poison]
        flags = None
        keep_rows = np.ones(len(chosen), bool)
        weights = sizes.copy()
        ctx = RoundContext(t, tuple(chosen), flat, sizes, tuple(r.audit for r in results), history)
        watched = tuple((name, frozenset(mon(ctx).flagged_clients)) for name, mon in sorted((monitors or {}).items()))
        if defense is not None:
            verdict = defense(ctx)
            flags = verdict.flagged_clients
            if getattr(defense, "enforce", True):
                keep_rows = np.array([c not in flags for c in chosen])
                if verdict.weights_override is not None:
                    weights = weights * np.array([verdict.weights_override.get(c, 1.0) for c in chosen])
        for c, row in zip(chosen, flat):
            prev = history.get(c)
            history[c] = DeltaHistory(row.copy(), 1) if prev is None else DeltaHistory(prev.total + row, prev.rounds + 1)
        rows = keep_rows & (weights > 0)
        if rows.any():
            agg = _aggregate(flat[rows], weights[rows], aggregator, krum_f)
            upd = M.unflatten(agg, params)
            for k in M.PARAM_KEYS:
                params[k] = params[k] + upd[k]
        params["steps"] = params["steps"] + 1
        records.append(RoundRecord(
            round=t,
            clean_accuracy=M.accuracy(params, ds.x_test, ds.y_test),
            asr=float(np.mean(M.predict(params, x_trig) == config.target_label)) if keep.any() else 0.0,
            sigma_t=sigma_at(schedule, t) if config.trigger == "fractal" else 0.0,
            train_loss=M.loss(params, ds.x_train, ds.y_train),
            update_norms=tuple(float(v) for v in np.linalg.norm(flat, axis=1)),
            flags=flags,
            monitor_flags=watched,
        ))
    grad_dev = float("nan")
    if last_pairs:
        ps = last_pairs[0]
        take = min(grad_dev_pairs, len(ps))
        devs = [gradient_deviation(params, ps.clean[i], ps.poisoned[i], int(ps.true_labels[i]),
                                   config.target_label) for i in range(take)]
        grad_dev = float(np.mean(devs))
    stealth = acc.report(grad_dev_mean=grad_dev, L_delta=1.0, input_dim=ds.input_dim)
    return RunResult(config, records, params, malicious, stealth, byte_log)


@dataclass(frozen=True, eq=False)
class DeltaHistory:
    """Running sum of a client's submitted deltas."""

    total: np.ndarray
    rounds: int

    def __len__(self) -> int:
        return self.rounds


@dataclass(frozen=True)
class SearchResult:
    n: int
    probes: dict
    shard_size: int


def median_probe(config: FedConfig, n: int, seeds, schedule_for, ifs, embed, baselines: dict):
    """Median ASR and median clean-accuracy drop over ``seeds`` at poison count ``n``."""
    asrs, drops = [], []
    for s in seeds:
        cfg = replace(config, seed=s, poison_per_client=n)
        if s not in baselines:
            benign = replace(cfg, malicious_ratio=0.0)
            baselines[s] = run_attack(benign, schedule_for(benign), ifs, embed).final.clean_accuracy
        res = run_attack(cfg, schedule_for(cfg), ifs, embed).final
        asrs.append(res.asr)
        drops.append(baselines[s] - res.clean_accuracy)
    return float(np.median(asrs)), float(np.median(drops))


def min_poison_search(config: FedConfig, asr_target: float, schedule_for=None, ifs=None,
                      embed=None, seeds=None, max_clean_drop: float = 0.02,
                      baselines: dict | None = None) -> SearchResult:
    """Smallest per-client poison count whose 3-seed median run meets ``asr_target``.

    A probe succeeds when the median ASR reaches the target and the median
    clean-accuracy drop against the benign run stays within
    ``max_clean_drop``, so a collapsed model cannot pass.  Bisection assumes
    success is monotone in N.
    """
    if not 0.0 < asr_target < 1.0:
        raise ValueError("asr_target must lie in (0, 1)")
    schedule_for = schedule_for or (lambda c: ScheduleParams.for_rounds(c.rounds))
    seeds = tuple(seeds) if seeds is not None else (config.seed, config.seed + 1, config.seed + 2)
    baselines = {} if baselines is None else baselines
    shard = len(dataset_for(config).y_train) // config.num_clients
    probes: dict = {}

    def ok(n: int) -> bool:
        if n not in probes:
            probes[n] = median_probe(config, n, seeds, schedule_for, ifs, embed, baselines)
        a, d = probes[n]
        return a >= asr_target and d <= max_clean_drop

    if not ok(shard):
        raise TargetUnreachable(f"ASR target {asr_target} not met even with N = C_i = {shard}")
    lo, hi = 0, shard
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return SearchResult(hi, dict(sorted(probes.items())), shard)
