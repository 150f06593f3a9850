"""Vocal-classification teacher: predicts a speaker's side class from a supervector.

Trained either centrally (the "offline" teacher) or with federated averaging
under one of four privacy regimes.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dp_mech
from .dp_mech import AccountantConfig, MechanismConfig, Placement, PrivacyParams
from .errors import ConfigError, InputError
from .fed_sim import ClientDataset, RoundConfig, derive_rng, run_federated_training
from .nn_core import (
    XAVIER_SIGMOID,
    Network,
    NetworkSpec,
    OptimizerConfig,
    accuracy,
    load_checkpoint,
    mlp_spec,
    predict,
    save_checkpoint,
    train_epoch,
)

HEAD = "side"


class Regime(str, enum.Enum):
    NO_DP = "no_dp"
    LOCAL_DP = "local_dp"
    CENTRAL_DP = "central_dp"
    CENTRAL_WEAK_LOCAL = "central_weak_local"
    CENTRAL_OFFLINE = "central_offline"


FEDERATED_REGIMES = (Regime.NO_DP, Regime.LOCAL_DP, Regime.CENTRAL_DP, Regime.CENTRAL_WEAK_LOCAL)


@dataclass(frozen=True)
class TeacherSpec:
    input_dim: int = 520
    num_classes: int = 6
    hidden: tuple[int, ...] = (128, 128, 128)
    batch_norm: bool = False
    init: str = XAVIER_SIGMOID

    def network_spec(self) -> NetworkSpec:
        return mlp_spec(self.input_dim, self.hidden, None, heads=((HEAD, self.num_classes),),
                        batch_norm=self.batch_norm, init=self.init)


@dataclass(frozen=True)
class PrivacySettings:
    """Targets for the DP regimes; noise levels are derived from these."""

    central: PrivacyParams = field(default_factory=lambda: PrivacyParams(2.0, 1e-5))
    local_epsilon: float = 2.0
    weak_local_epsilon: float = 25.7
    local_delta: float = 1e-5
    clip_norm: float = 1.0
    accountant: AccountantConfig = field(default_factory=AccountantConfig)


def regime_mechanisms(
    regime: Regime | str, privacy: PrivacySettings
) -> tuple[MechanismConfig, MechanismConfig, dict]:
    """Local and central mechanisms for ``regime`` plus the privacy claim they support."""
    regime = Regime(regime)
    none = MechanismConfig()
    c = privacy.clip_norm
    acc = privacy.accountant
    if regime == Regime.NO_DP:
        return none, none, {"guarantee": "anonymity only"}
    if regime == Regime.CENTRAL_OFFLINE:
        return none, none, {"guarantee": "central data"}

    report: dict = {"clip_norm": c}
    local = none
    central = none
    if regime in (Regime.LOCAL_DP, Regime.CENTRAL_WEAK_LOCAL):
        eps = privacy.local_epsilon if regime == Regime.LOCAL_DP else privacy.weak_local_epsilon
        pp = PrivacyParams(eps, privacy.local_delta)
        mult = dp_mech.gaussian_sigma(pp, 1.0)
        placement = Placement.LOCAL if regime == Regime.LOCAL_DP else Placement.WEAK_LOCAL
        local = MechanismConfig(c, mult, placement)
        report["local"] = {"epsilon": eps, "delta": pp.delta, "noise_multiplier": mult}
    if regime in (Regime.CENTRAL_DP, Regime.CENTRAL_WEAK_LOCAL):
        q = acc.sampling_rate
        z = dp_mech.accountant_sigma(privacy.central, q, acc.max_rounds)
        central = MechanismConfig(c, z, Placement.CENTRAL)
        report["central"] = {
            "epsilon": privacy.central.epsilon,
            "delta": privacy.central.delta,
            "noise_multiplier": z,
            "sampling_rate": q,
            "max_rounds": acc.max_rounds,
            "population_size": acc.population_size,
            "cohort_size": acc.cohort_size,
        }
    return local, central, report


@dataclass
class TeacherArtifact:
    net: Network
    regime: Regime
    accuracy: float
    telemetry: list[dict]
    privacy_report: dict
    seed: int

    def metadata(self) -> dict:
        return {
            "regime": self.regime.value,
            "accuracy": self.accuracy,
            "privacy_report": self.privacy_report,
            "seed": self.seed,
        }

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.ckpt`` (parameters) and ``<path>.json`` (metadata)."""
        path = Path(path)
        ckpt, meta = path.with_suffix(".ckpt"), path.with_suffix(".json")
        save_checkpoint(ckpt, self.net, {"role": "teacher"})
        meta.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return ckpt, meta

    @classmethod
    def load(cls, path) -> "TeacherArtifact":
        path = Path(path)
        net, _ = load_checkpoint(path.with_suffix(".ckpt"))
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(net, Regime(meta["regime"]), meta["accuracy"], [], meta["privacy_report"], meta["seed"])


def train_teacher_central(
    x: np.ndarray,
    y: np.ndarray,
    spec: TeacherSpec,
    opt: OptimizerConfig,
    epochs: int,
    eval_set: tuple[np.ndarray, np.ndarray],
    seed: int,
) -> TeacherArtifact:
    """Plain minibatch SGD on pooled data ("VC offline")."""
    if len(x) == 0:
        raise InputError("no training data for the central teacher")
    net = Network(spec.network_spec(), derive_rng(seed, 0))
    rng = derive_rng(seed, 1)
    velocity: dict = {}
    history = []
    acc = accuracy(net, *eval_set, HEAD)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        loss = train_epoch(net, x, y, opt, velocity, rng, HEAD)
        acc = accuracy(net, *eval_set, HEAD)
        history.append({"epoch": epoch, "loss": loss, "accuracy": acc,
                         "duration_ms": (time.perf_counter() - t0) * 1e3})
    return TeacherArtifact(net, Regime.CENTRAL_OFFLINE, acc, history, {"guarantee": "central data"}, seed)


def train_teacher_federated(
    clients: list[ClientDataset],
    spec: TeacherSpec,
    regime: Regime | str,
    round_cfg: RoundConfig,
    rounds: int,
    eval_set: tuple[np.ndarray, np.ndarray],
    seed: int,
    privacy: PrivacySettings | None = None,
    init: Network | None = None,
) -> TeacherArtifact:
    """Federated training with the mechanisms implied by ``regime``.

    ``init`` warm-starts from an existing network (e.g. the offline teacher).
    """
    regime = Regime(regime)
    if regime not in FEDERATED_REGIMES:
        raise ConfigError(f"{regime.value} is not a federated regime")
    privacy = privacy or PrivacySettings()
    if rounds > privacy.accountant.max_rounds and regime in (Regime.CENTRAL_DP, Regime.CENTRAL_WEAK_LOCAL):
        raise ConfigError(
            f"{rounds} rounds exceed the accountant budget of {privacy.accountant.max_rounds}"
        )
    local, central, report = regime_mechanisms(regime, privacy)
    cfg = RoundConfig(
        cohort_size=round_cfg.cohort_size,
        local_epochs=round_cfg.local_epochs,
        optimizer=round_cfg.optimizer,
        local_mechanism=local,
        central_mechanism=central,
        head=HEAD,
        threads=round_cfg.threads,
    )
    net = init.copy() if init is not None else Network(spec.network_spec(), derive_rng(seed, 0))
    if net.spec != spec.network_spec():
        raise ConfigError("warm-start network does not match the teacher spec")
    if "central" in report:
        c = report["central"]
        report["central"]["achieved_epsilon"] = dp_mech.accountant_epsilon(
            c["noise_multiplier"], c["sampling_rate"], rounds, c["delta"]
        )
    net, series = run_federated_training(net, clients, rounds, cfg, eval_set, seed)
    return TeacherArtifact(net, regime, series[-1].accuracy, [asdict(t) for t in series], report, seed)


def teacher_logits(artifact: TeacherArtifact | Network, x: np.ndarray) -> np.ndarray:
    net = artifact.net if isinstance(artifact, TeacherArtifact) else artifact
    return predict(net, np.asarray(x, dtype=np.float64), HEAD)


def first_round_snr(artifact: TeacherArtifact) -> float:
    """Effective SNR of round one; NaN for the offline teacher, inf without noise."""
    if artifact.regime == Regime.CENTRAL_OFFLINE:
        return float("nan")
    if not artifact.telemetry:
        return float("inf")
    return float(artifact.telemetry[0]["effective_snr"])

