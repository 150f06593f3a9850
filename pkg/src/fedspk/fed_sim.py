"""Federated averaging simulator with local and central Gaussian noise.

Randomness is derived per round, per purpose and per client from the run seed
(``SeedSequence(seed, spawn_key=(round, purpose, client_id))``), so local
updates can run in any order or in parallel and still aggregate bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dp_mech
from .dp_mech import MechanismConfig, Placement
from .errors import ConfigError, InputError
from .nn_core import Network, OptimizerConfig, accuracy, train_epoch

_COHORT, _LOCAL_TRAIN, _LOCAL_NOISE, _CENTRAL_NOISE = 0, 1, 2, 3


@dataclass
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    example_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class RoundConfig:
    cohort_size: int = 100
    local_epochs: int = 1
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=0.5, momentum=0.9, weight_decay=0.0, batch_size=16)
    )
    local_mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    central_mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    aggregation: str = "uniform_mean"
    head: str = "side"
    threads: int = 1

    def __post_init__(self):
        if self.cohort_size < 1:
            raise ConfigError("cohort_size must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.aggregation != "uniform_mean":
            raise ConfigError(f"unsupported aggregation {self.aggregation!r}")
        if self.local_mechanism.placement not in (Placement.NONE, Placement.LOCAL, Placement.WEAK_LOCAL):
            raise ConfigError("local mechanism placement must be none, local or weak_local")
        if self.central_mechanism.placement not in (Placement.NONE, Placement.CENTRAL):
            raise ConfigError("central mechanism placement must be none or central")


@dataclass
class RoundTelemetry:
    round: int
    accuracy: float
    local_snr: float
    central_snr: float
    effective_snr: float
    update_norm: float
    duration_ms: float
    skipped_clients: int = 0


@dataclass
class FedState:
    net: Network
    population: list[ClientDataset]
    seed: int
    round_index: int = 0


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def sample_cohort(
    population: list[ClientDataset], cohort_size: int, rng: np.random.Generator
) -> list[ClientDataset]:
    """Uniform sample without replacement, returned in ascending client id."""
    if cohort_size > len(population):
        raise InputError(f"cohort_size {cohort_size} exceeds population of {len(population)} clients")
    if cohort_size < 1:
        raise InputError("cohort_size must be >= 1")
    idx = rng.choice(len(population), size=cohort_size, replace=False)
    chosen = [population[i] for i in idx]
    return sorted(chosen, key=lambda c: c.client_id)


def local_update(
    central: Network, client: ClientDataset, cfg: RoundConfig, rng: np.random.Generator
) -> np.ndarray | None:
    """Train a copy of ``central`` on one client; return the flat parameter delta.

    Returns ``None`` for a client with no data.
    """
    if len(client) == 0:
        return None
    if client.x.shape[1] != central.spec.input_dim:
        raise ConfigError(f"client {client.client_id} data dim does not match the model")
    net = central.copy()
    velocity: dict[str, np.ndarray] = {}
    for _ in range(cfg.local_epochs):
        train_epoch(net, client.x, client.y, cfg.optimizer, velocity, rng, cfg.head)
    return net.flat_params() - central.flat_params()


def _privatize_local(delta, cfg: RoundConfig, rng):
    """Clip and locally noise one delta; returns (sent, clipped, noise)."""
    local, central = cfg.local_mechanism, cfg.central_mechanism
    clip = None
    if local.placement != Placement.NONE:
        clip = local.clip_norm
    if central.placement == Placement.CENTRAL:
        clip = central.clip_norm if clip is None else min(clip, central.clip_norm)
    clipped = delta if clip is None else dp_mech.clip_update(delta, clip)[0]
    if local.placement == Placement.NONE:
        return clipped, clipped, None
    sent, noise = dp_mech.add_gaussian_noise(clipped, local.sigma, rng)
    return sent, clipped, noise


def federated_round(state: FedState, cfg: RoundConfig) -> RoundTelemetry:
    """Run one round of federated averaging, updating ``state.net`` in place.

    The returned telemetry has ``accuracy`` set to NaN; the training loop
    fills it in after evaluation.
    """
    t0 = time.perf_counter()
    r = state.round_index
    cohort = sample_cohort(state.population, cfg.cohort_size, derive_rng(state.seed, r, _COHORT))
    central = state.net

    def client_job(client):
        delta = local_update(central, client, cfg, derive_rng(state.seed, r, _LOCAL_TRAIN, client.client_id))
        if delta is None:
            return None
        return _privatize_local(delta, cfg, derive_rng(state.seed, r, _LOCAL_NOISE, client.client_id))

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(client_job, cohort))
    else:
        results = [client_job(c) for c in cohort]

    dim = central.num_params
    sent_sum = np.zeros(dim)
    clipped_sum = np.zeros(dim)
    noise_sum = np.zeros(dim)
    local_snrs = []
    skipped = 0
    for res in results:  # cohort is sorted by client id
        if res is None:
            skipped += 1
            continue
        sent, clipped, noise = res
        sent_sum += sent
        clipped_sum += clipped
        if noise is not None:
            noise_sum += noise
            local_snrs.append(dp_mech.snr(clipped, noise))
        else:
            local_snrs.append(math.inf)
    m = len(results) - skipped
    if m == 0:
        return RoundTelemetry(r, math.nan, math.inf, math.inf, math.inf, 0.0,
                              (time.perf_counter() - t0) * 1e3, skipped)
    mean_sent = sent_sum / m
    mean_clipped = clipped_sum / m

    cm = cfg.central_mechanism
    if cm.placement == Placement.CENTRAL:
        sigma = cm.noise_multiplier * cm.clip_norm / m
        update, central_noise = dp_mech.add_gaussian_noise(
            mean_sent, sigma, derive_rng(state.seed, r, _CENTRAL_NOISE)
        )
    else:
        update, central_noise = mean_sent, np.zeros(dim)

    central.set_flat_params(central.flat_params() + update)
    state.round_index += 1
    total_noise = noise_sum / m + central_noise
    return RoundTelemetry(
        round=r,
        accuracy=math.nan,
        local_snr=float(np.mean(local_snrs)),
        central_snr=dp_mech.snr(mean_sent, central_noise),
        effective_snr=dp_mech.snr(mean_clipped, total_noise),
        update_norm=float(np.linalg.norm(mean_clipped)),
        duration_ms=(time.perf_counter() - t0) * 1e3,
        skipped_clients=skipped,
    )


def run_federated_training(
    net: Network,
    population: list[ClientDataset],
    rounds: int,
    cfg: RoundConfig,
    eval_set: tuple[np.ndarray, np.ndarray] | None,
    seed: int,
) -> tuple[Network, list[RoundTelemetry]]:
    """Iterate :func:`federated_round`, evaluating on ``eval_set`` after each round.

    ``net`` is trained in place and also returned.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if net.has_batchnorm():
        raise ConfigError("federated training does not support batch-norm layers")
    if cfg.cohort_size > len(population):
        raise InputError(f"cohort_size {cfg.cohort_size} exceeds population of {len(population)} clients")
    state = FedState(net, population, seed)
    series = []
    for _ in range(rounds):
        tel = federated_round(state, cfg)
        if eval_set is not None:
            tel.accuracy = accuracy(net, eval_set[0], eval_set[1], cfg.head)
        series.append(tel)
    return net, series


# -- telemetry export ---------------------------------------------------------

TELEMETRY_COLUMNS = (
    "round", "accuracy", "local_snr", "central_snr", "effective_snr", "update_norm", "duration_ms",
)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_telemetry_csv(series: list[RoundTelemetry], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TELEMETRY_COLUMNS)
        for t in series:
            d = asdict(t)
            w.writerow([_fmt(d[c]) for c in TELEMETRY_COLUMNS])


def write_telemetry_jsonl(series: list[RoundTelemetry], path) -> None:
    with open(path, "w") as f:
        for t in series:
            d = {k: (v if not (isinstance(v, float) and not math.isfinite(v)) else repr(v)) for k, v in asdict(t).items()}
            f.write(json.dumps(d, sort_keys=True) + "\n")
