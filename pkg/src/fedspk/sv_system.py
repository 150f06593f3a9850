"""Speaker-verification student: embedding training, distillation, scoring and EER."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .fed_sim import derive_rng
from .nn_core import (
    Network,
    NetworkSpec,
    OptimizerConfig,
    cross_entropy_loss,
    minibatches,
    mlp_spec,
    predict,
    sgd_step,
    softmax,
)
from .synth_data import TrialSet

SPEAKER = "speaker"
SIDE = "side"


@dataclass(frozen=True)
class StudentSpec:
    """4 x 256 sigmoid trunk with batch norm, then a 100-dim linear embedding.

    ``num_side_classes`` set to a value adds the side-information head used for
    multi-task training; ``None`` builds the baseline network.
    """

    num_speakers: int
    input_dim: int = 520
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    embedding_dim: int = 100
    num_side_classes: int | None = None

    def network_spec(self) -> NetworkSpec:
        heads = [(SPEAKER, self.num_speakers)]
        if self.num_side_classes is not None:
            heads.append((SIDE, self.num_side_classes))
        return mlp_spec(self.input_dim, self.hidden, self.embedding_dim, tuple(heads), batch_norm=True)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 10.0
    gamma: float | None = None  # None: balance both loss terms at initialisation

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.gamma is not None and self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


# -- losses -------------------------------------------------------------------


def distill_loss(z: np.ndarray, v: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Squared error between temperature-softened softmaxes, scaled by T^2 / N_c.

    Per example ``(T^2 / N_c) * sum_i (softmax(v/T)_i - softmax(z/T)_i)^2``;
    returns the batch mean and its gradient w.r.t. the student logits ``z``.
    """
    if not temperature > 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if z.shape != v.shape:
        raise InputError(f"student logits {z.shape} and teacher logits {v.shape} differ")
    n, c = z.shape
    t = float(temperature)
    p = softmax(z, t)
    q = softmax(v, t)
    diff = p - q
    loss = (t * t / c) * np.sum(diff * diff, axis=1)
    # d/dz of the per-example loss: (2T/N_c) * (p*g - p * <p, g>) with g = p - q
    inner = np.sum(p * diff, axis=1, keepdims=True)
    grad = (2.0 * t / c) * (p * diff - p * inner) / n
    return float(loss.mean()), grad


@dataclass
class MTLLoss:
    total: float
    speaker: float
    side: float
    grads: dict[str, np.ndarray] = field(repr=False)


def mtl_loss(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray,
    temperature: float,
    gamma: float,
    mode: str = "train",
) -> MTLLoss:
    """Batch mean of ``L_spk + gamma * L_vc`` with gradients for every student block.

    ``teacher_logits`` are precomputed by the frozen teacher, which therefore
    never receives gradients.
    """
    if SIDE not in dict(net.spec.heads):
        raise ConfigError("multi-task loss needs a student with a side-information head")
    out = net.forward(x, mode)
    l_spk, g_spk = cross_entropy_loss(out.logits[SPEAKER], y)
    l_vc, g_vc = distill_loss(out.logits[SIDE], teacher_logits, temperature)
    grads = net.backward({SPEAKER: g_spk, SIDE: gamma * g_vc})
    return MTLLoss(l_spk + gamma * l_vc, l_spk, l_vc, grads)


def balance_gamma(net: Network, x: np.ndarray, y: np.ndarray, teacher_logits: np.ndarray, temperature: float) -> float:
    """Weight that equalises speaker and distillation losses for ``net`` as it is now."""
    probe = net.copy()
    out = probe.forward(x, "infer")
    l_spk, _ = cross_entropy_loss(out.logits[SPEAKER], y)
    l_vc, _ = distill_loss(out.logits[SIDE], teacher_logits, temperature)
    if l_vc <= 0:
        return 1.0
    return float(l_spk / l_vc)


# -- training -----------------------------------------------------------------


@dataclass
class StudentResult:
    net: Network
    history: list[dict]
    gamma: float | None
    mode: str

    @property
    def speaker_accuracy(self) -> float:
        return self.history[-1]["speaker_accuracy"] if self.history else float("nan")

    @property
    def side_accuracy(self) -> float:
        return self.history[-1].get("side_accuracy", float("nan")) if self.history else float("nan")


def train_student(
    x: np.ndarray,
    y: np.ndarray,
    spec: StudentSpec,
    mode: str,
    opt: OptimizerConfig,
    epochs: int,
    seed: int,
    teacher_logits: np.ndarray | None = None,
    distill: DistillConfig | None = None,
    eval_set: tuple[np.ndarray, np.ndarray, np.ndarray | None] | None = None,
) -> StudentResult:
    """Train the embedding network as a speaker classifier, optionally multi-task.

    ``teacher_logits`` must align row-for-row with ``x`` in ``mtl`` mode.
    ``eval_set`` is ``(x, speaker labels, teacher logits or None)``; per epoch
    the history records speaker accuracy and, in ``mtl`` mode, agreement of the
    side head with the teacher's argmax.
    """
    if mode not in ("baseline", "mtl"):
        raise ConfigError(f"mode must be 'baseline' or 'mtl', got {mode!r}")
    if mode == "mtl":
        if teacher_logits is None or spec.num_side_classes is None:
            raise ConfigError("mtl mode needs teacher logits and a side head")
        if len(teacher_logits) != len(x):
            raise InputError("teacher logits must align with the training data")
        distill = distill or DistillConfig()
    net = Network(spec.network_spec(), derive_rng(seed, 0))
    rng = derive_rng(seed, 1)
    gamma = None
    if mode == "mtl":
        gamma = distill.gamma
        if gamma is None:
            probe = derive_rng(seed, 2).permutation(len(x))[: opt.batch_size]
            gamma = balance_gamma(net, x[probe], y[probe], teacher_logits[probe], distill.temperature)
    velocity: dict = {}
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(len(x), opt.batch_size, rng):
            if mode == "mtl":
                res = mtl_loss(net, x[idx], y[idx], teacher_logits[idx], distill.temperature, gamma)
                loss, grads = res.total, res.grads
            else:
                out = net.forward(x[idx], "train")
                loss, g = cross_entropy_loss(out.logits[SPEAKER], y[idx])
                grads = net.backward({SPEAKER: g})
            sgd_step(net.params, grads, opt, velocity)
            total += loss * len(idx)
        rec = {"epoch": epoch, "loss": total / len(x)}
        if eval_set is not None:
            ex, ey, et = eval_set
            rec["speaker_accuracy"] = float(np.mean(predict(net, ex, SPEAKER).argmax(axis=1) == ey))
            if mode == "mtl" and et is not None:
                rec["side_accuracy"] = float(np.mean(predict(net, ex, SIDE).argmax(axis=1) == et.argmax(axis=1)))
        history.append(rec)
    return StudentResult(net, history, gamma, mode)


# -- embedding and scoring ----------------------------------------------------


def embed(net: Network, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Inference-mode embedding-layer output; classification heads are skipped."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    chunks = [net.forward(x[i:i + batch_size], "infer", heads=False).embedding
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, net.spec.embedding_dim))


@dataclass
class SpeakerProfile:
    speaker_id: int
    embeddings: np.ndarray  # (N, embedding_dim)
    utterance_ids: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(self.embeddings)
        if len(self.embeddings) < 1:
            raise InputError("a speaker profile needs at least one enrollment embedding")


def enroll(net: Network, speaker_id: int, x: np.ndarray, utterance_ids=None) -> SpeakerProfile:
    return SpeakerProfile(speaker_id, embed(net, x), utterance_ids)


def _unit_rows(e: np.ndarray, ids, what: str) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] == 0)
    if bad.size:
        uid = ids[bad[0]] if ids is not None else int(bad[0])
        raise NumericError(f"zero-norm {what} embedding (utterance {uid})")
    return e / norms


def sv_score(profile: SpeakerProfile, test_embedding: np.ndarray, test_id=None) -> float:
    """Mean cosine similarity between the test embedding and each enrollment embedding."""
    t = _unit_rows(np.atleast_2d(test_embedding), [test_id], "test")[0]
    e = _unit_rows(profile.embeddings, profile.utterance_ids, "enrollment")
    return float(np.mean(e @ t))


# -- EER ------------------------------------------------------------------------


@dataclass
class EvalReport:
    eer: float
    threshold: float
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    trial_count: int

    def to_dict(self) -> dict:
        return {"eer": self.eer, "threshold": self.threshold, "trial_count": self.trial_count}

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "far", "frr"])
            for t, a, r in zip(self.thresholds, self.far, self.frr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


def interpolate_crossing(d_prev, d_next, a_prev, a_next):
    """Linear interpolation of ``a`` where ``d`` crosses zero between two points."""
    t = d_prev / (d_prev - d_next)
    return a_prev + t * (a_next - a_prev), t


def compute_eer(scores: np.ndarray, is_target: np.ndarray) -> EvalReport:
    """Equal error rate over all distinct score thresholds (accept if score >= threshold).

    FAR is the accepted fraction of impostors and FRR the rejected fraction of
    targets. A final operating point above every score (FAR 0, FRR 1) closes
    the curve; the EER is interpolated linearly between the two adjacent
    operating points where FAR - FRR changes sign.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise InputError("scores and labels must be 1-d arrays of equal length")
    tar = np.sort(scores[is_target])
    imp = np.sort(scores[~is_target])
    if len(tar) == 0 or len(imp) == 0:
        raise InputError("EER needs at least one target and one impostor trial")
    if not np.all(np.isfinite(scores)):
        raise InputError("scores must be finite")
    thr = np.unique(scores)
    n_imp, n_tar = len(imp), len(tar)
    # integer counts per threshold, plus the closing point above every score
    acc = np.append(n_imp - np.searchsorted(imp, thr, side="left"), 0)
    rej = np.append(np.searchsorted(tar, thr, side="left"), n_tar)
    far = acc / n_imp
    frr = rej / n_tar
    d = acc * n_tar - rej * n_imp  # sign of FAR - FRR, exact
    k = int(np.argmax(d <= 0))
    if d[k] == 0:
        eer = float(far[k])
        threshold = thr[k] if k < len(thr) else thr[-1]
    else:
        # crossing of the segment with FAR = FRR, as one correctly rounded division
        a0, a1, r0, r1 = (int(v) for v in (acc[k - 1], acc[k], rej[k - 1], rej[k]))
        eer = (a0 * r1 - a1 * r0) / (n_tar * (a0 - a1) + n_imp * (r1 - r0))
        _, t = interpolate_crossing(float(d[k - 1]), float(d[k]), 0.0, 1.0)
        threshold = thr[k - 1] + t * (thr[k] - thr[k - 1]) if k < len(thr) else thr[-1]
    return EvalReport(float(eer), float(threshold), thr, far[:-1], frr[:-1], len(scores))


def score_trials(net: Network, trials: TrialSet) -> np.ndarray:
    """Mean-cosine score for every trial; each utterance is embedded exactly once."""
    keys = sorted(trials.profiles)
    enrolled = {k: _unit_rows(embed(net, trials.profiles[k]), trials.enroll_ids.get(k), "enrollment")
                for k in keys}
    test = _unit_rows(embed(net, trials.test_x), trials.test_ids, "test")
    scores = np.empty(len(trials))
    for k in keys:
        sel = np.flatnonzero(trials.profile_ids == k)
        if sel.size:
            scores[sel] = (test[sel] @ enrolled[k].T).mean(axis=1)
    return scores


def evaluate_sv(net: Network, trials: TrialSet) -> EvalReport:
    return compute_eer(score_trials(net, trials), trials.is_target)

