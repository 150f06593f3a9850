"""Synthetic speaker population standing in for real trigger-phrase supervectors.

Generative model (all randomness from numpy's PCG64 via ``SeedSequence``):

* ``num_side_classes`` centroids in a ``latent_dim`` space, mutually
  orthogonal and scaled so every pair is ``class_separation`` apart;
* speaker latent = centroid of its side class + ``speaker_spread * N(0, I)``;
* utterance = ``A @ (speaker latent + w * N(0, I)) + b + w * obs_noise * N(0, I)``
  where ``w = within_speaker_noise`` and ``A``, ``b`` are a fixed random affine
  map into ``supervector_dim`` dimensions.

Global structure is drawn from spawn key ``(0,)`` and speaker ``i`` from
``(1, i)``, so speakers can be generated independently and in any order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .fed_sim import ClientDataset


@dataclass(frozen=True)
class PopulationConfig:
    num_speakers: int = 500
    utterances_per_speaker: int = 40
    supervector_dim: int = 520  # 26 cepstral coefficients x 20 HMM states
    num_side_classes: int = 6
    latent_dim: int = 16
    within_speaker_noise: float = 0.6
    class_separation: float = 6.0
    speaker_spread: float = 1.0
    obs_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_side_classes < 2:
            raise ConfigError("num_side_classes must be >= 2")
        if self.latent_dim < self.num_side_classes:
            raise ConfigError("latent_dim must be >= num_side_classes (orthogonal centroids)")
        if self.num_speakers < 1 or self.utterances_per_speaker < 1 or self.supervector_dim < 1:
            raise ConfigError("population sizes must be positive")
        if self.within_speaker_noise < 0 or self.class_separation < 0 or self.speaker_spread < 0:
            raise ConfigError("noise and separation scales must be >= 0")


@dataclass
class SpeakerRecord:
    speaker_id: int
    side_class: int
    utterances: np.ndarray  # (utterances_per_speaker, supervector_dim)

    def utterance_ids(self) -> np.ndarray:
        n = len(self.utterances)
        return self.speaker_id * 1_000_000 + np.arange(n)


def _structure(cfg: PopulationConfig):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    q, _ = np.linalg.qr(rng.standard_normal((cfg.latent_dim, cfg.num_side_classes)))
    centroids = q.T * (cfg.class_separation / np.sqrt(2.0))
    A = rng.standard_normal((cfg.latent_dim, cfg.supervector_dim)) / np.sqrt(cfg.latent_dim)
    b = rng.standard_normal(cfg.supervector_dim)
    classes = np.arange(cfg.num_speakers) % cfg.num_side_classes
    classes = rng.permutation(classes)
    return centroids, A, b, classes


def generate_population(cfg: PopulationConfig) -> list[SpeakerRecord]:
    centroids, A, b, classes = _structure(cfg)
    w = cfg.within_speaker_noise
    out = []
    for sid in range(cfg.num_speakers):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(1, sid))))
        c = int(classes[sid])
        latent = centroids[c] + cfg.speaker_spread * rng.standard_normal(cfg.latent_dim)
        session = rng.standard_normal((cfg.utterances_per_speaker, cfg.latent_dim))
        obs = rng.standard_normal((cfg.utterances_per_speaker, cfg.supervector_dim))
        x = (latent + w * session) @ A + b + (w * cfg.obs_noise) * obs
        out.append(SpeakerRecord(sid, c, x))
    return out


def stack(population: list[SpeakerRecord], utterances: slice = slice(None)):
    """Concatenate utterances into ``(x, side_labels, speaker_ids)`` arrays."""
    xs, side, spk = [], [], []
    for rec in population:
        u = rec.utterances[utterances]
        xs.append(u)
        side.append(np.full(len(u), rec.side_class))
        spk.append(np.full(len(u), rec.speaker_id))
    if not xs:
        raise InputError("empty population")
    return np.concatenate(xs), np.concatenate(side), np.concatenate(spk)


def partition_to_clients(
    population: list[SpeakerRecord],
    clients_per_speaker: int = 1,
    utterances: slice = slice(None),
) -> list[ClientDataset]:
    """Assign every utterance to exactly one client; speakers never share a client.

    With ``clients_per_speaker > 1`` a speaker's utterances are dealt round-robin
    over that many clients.
    """
    if not population:
        raise InputError("empty population")
    if clients_per_speaker < 1:
        raise ConfigError("clients_per_speaker must be >= 1")
    clients = []
    for rec in population:
        x = rec.utterances[utterances]
        ids = rec.utterance_ids()[utterances]
        for j in range(clients_per_speaker):
            sel = slice(j, None, clients_per_speaker)
            if len(x[sel]) == 0:
                continue
            clients.append(
                ClientDataset(
                    client_id=rec.speaker_id * clients_per_speaker + j,
                    x=x[sel],
                    y=np.full(len(x[sel]), rec.side_class),
                    example_ids=ids[sel],
                )
            )
    return clients


@dataclass
class TrialSet:
    """Enrollment profiles plus scored (profile, test utterance) pairs."""

    profiles: dict[int, np.ndarray]
    profile_ids: np.ndarray
    test_x: np.ndarray
    test_ids: np.ndarray
    is_target: np.ndarray
    enroll_ids: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.is_target)

    def save(self, path) -> None:
        keys = sorted(self.profiles)
        np.savez(
            path,
            profile_keys=np.array(keys, dtype=np.int64),
            profiles=np.stack([self.profiles[k] for k in keys]),
            enroll_ids=np.stack([self.enroll_ids[k] for k in keys]),
            profile_ids=self.profile_ids,
            test_x=self.test_x,
            test_ids=self.test_ids,
            is_target=self.is_target,
        )

    @classmethod
    def load(cls, path) -> "TrialSet":
        with np.load(path, allow_pickle=False) as z:
            keys = [int(k) for k in z["profile_keys"]]
            return cls(
                profiles={k: z["profiles"][i] for i, k in enumerate(keys)},
                profile_ids=z["profile_ids"],
                test_x=z["test_x"],
                test_ids=z["test_ids"],
                is_target=z["is_target"].astype(bool),
                enroll_ids={k: z["enroll_ids"][i] for i, k in enumerate(keys)},
            )


def build_trials(
    population: list[SpeakerRecord],
    enroll_n: int,
    impostor_ratio: float,
    rng: np.random.Generator,
) -> TrialSet:
    """First ``enroll_n`` utterances enroll; the rest are target trials.

    ``floor(targets * impostor_ratio)`` impostor trials pair a random profile
    with a random test utterance of a different speaker.
    """
    if impostor_ratio < 0:
        raise InputError("impostor_ratio must be >= 0")
    for rec in population:
        if len(rec.utterances) <= enroll_n:
            raise InputError(
                f"speaker {rec.speaker_id} has {len(rec.utterances)} utterances, needs > {enroll_n}"
            )
    if impostor_ratio > 0 and len(population) < 2:
        raise InputError("impostor trials need at least two speakers")
    profiles = {rec.speaker_id: rec.utterances[:enroll_n] for rec in population}
    enroll_ids = {rec.speaker_id: rec.utterance_ids()[:enroll_n] for rec in population}
    pid, tx, tid, tgt = [], [], [], []
    for rec in population:
        n_test = len(rec.utterances) - enroll_n
        pid.append(np.full(n_test, rec.speaker_id))
        tx.append(rec.utterances[enroll_n:])
        tid.append(rec.utterance_ids()[enroll_n:])
        tgt.append(np.ones(n_test, dtype=bool))
    n_targets = sum(len(p) for p in pid)
    n_imp = int(np.floor(n_targets * impostor_ratio))
    if n_imp:
        ns = len(population)
        prof = rng.integers(0, ns, size=n_imp)
        other = (prof + rng.integers(1, ns, size=n_imp)) % ns
        for a, b in zip(prof, other):
            rec_a, rec_b = population[a], population[b]
            j = enroll_n + rng.integers(0, len(rec_b.utterances) - enroll_n)
            pid.append(np.array([rec_a.speaker_id]))
            tx.append(rec_b.utterances[j:j + 1])
            tid.append(rec_b.utterance_ids()[j:j + 1])
            tgt.append(np.zeros(1, dtype=bool))
    return TrialSet(
        profiles=profiles,
        profile_ids=np.concatenate(pid),
        test_x=np.concatenate(tx),
        test_ids=np.concatenate(tid),
        is_target=np.concatenate(tgt),
        enroll_ids=enroll_ids,
    )


# -- CSV bundle ---------------------------------------------------------------
# One row per utterance: speaker_id, side_class, utt_index, v0 ... v{D-1}.
# Floats are written with repr() so values round-trip exactly.


def export_population(population: list[SpeakerRecord], path) -> None:
    dim = population[0].utterances.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["speaker_id", "side_class", "utt_index"] + [f"v{i}" for i in range(dim)])
        for rec in population:
            for j, u in enumerate(rec.utterances):
                w.writerow([rec.speaker_id, rec.side_class, j] + [repr(float(v)) for v in u])


def import_population(path) -> list[SpeakerRecord]:
    rows: dict[int, tuple[int, list]] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            sid, cls = int(row[0]), int(row[1])
            entry = rows.setdefault(sid, (cls, []))
            if entry[0] != cls:
                raise InputError(f"speaker {sid} has inconsistent side classes")
            entry[1].append((int(row[2]), [float(v) for v in row[3:]]))
    out = []
    for sid in sorted(rows):
        cls, utts = rows[sid]
        utts.sort(key=lambda t: t[0])
        out.append(SpeakerRecord(sid, cls, np.array([u for _, u in utts], dtype=np.float64)))
    return out
