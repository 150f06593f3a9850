"""End-to-end experiment pipeline: data, teachers, students, evaluation.

A run is described by one YAML file mapping onto :class:`ExperimentConfig`.
Every random stream is derived from ``seed``, so a config plus a seed fully
determines every numeric output file.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import subprocess
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__ as VERSION
from .dp_mech import AccountantConfig, PrivacyParams
from .errors import ConfigError
from .fed_sim import RoundConfig, RoundTelemetry, write_telemetry_csv, write_telemetry_jsonl
from .nn_core import XAVIER_SIGMOID, OptimizerConfig, save_checkpoint
from .sv_system import DistillConfig, StudentSpec, evaluate_sv, train_student
from .synth_data import PopulationConfig, build_trials, generate_population, partition_to_clients, stack
from .vc_model import (
    FEDERATED_REGIMES,
    PrivacySettings,
    Regime,
    TeacherArtifact,
    TeacherSpec,
    first_round_snr,
    teacher_logits,
    train_teacher_central,
    train_teacher_federated,
)

CENTRAL_REGIMES = (Regime.CENTRAL_DP, Regime.CENTRAL_WEAK_LOCAL)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class PopulationSection:
    num_speakers: int = 500
    utterances_per_speaker: int = 40
    supervector_dim: int = 520
    num_side_classes: int = 6
    latent_dim: int = 16
    within_speaker_noise: float = 0.6
    class_separation: float = 6.0
    speaker_spread: float = 1.0
    obs_noise: float = 1.0


@dataclass(frozen=True)
class SplitSection:
    """How the population is divided between roles.

    The first ``eval_speakers`` speakers are held out for teacher accuracy and
    verification trials. All remaining speakers are federated clients; the
    first ``student_speakers`` of them also form the student's training set,
    and the first ``offline_speakers`` of those are the offline teacher's data.
    """

    eval_speakers: int = 100
    student_speakers: int = 200
    offline_speakers: int = 60
    train_utterances: int = 30
    enroll_n: int = 5
    impostor_ratio: float = 3.0


@dataclass(frozen=True)
class OptimizerSection:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16

    def build(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay, self.batch_size)


@dataclass(frozen=True)
class TeacherSection:
    regimes: tuple[str, ...] = tuple(r.value for r in FEDERATED_REGIMES)
    hidden: tuple[int, ...] = (128, 128, 128)
    batch_norm: bool = False
    init: str = XAVIER_SIGMOID
    rounds: int = 60
    cohort_size: int = 50
    local_epochs: int = 1
    optimizer: OptimizerSection = OptimizerSection(0.5, 0.9, 0.0, 16)
    offline_epochs: int = 30
    offline_optimizer: OptimizerSection = OptimizerSection(0.05, 0.9, 5e-4, 32)


@dataclass(frozen=True)
class PrivacySection:
    epsilon: float = 2.0
    delta: float = 1e-5
    local_epsilon: float = 2.0
    weak_local_epsilon: float = 25.7
    local_delta: float = 1e-5
    clip_norm: float = 1.0
    population_size: int = 100_000_000
    cohort_size: int = 300
    max_rounds: int = 60

    def build(self) -> PrivacySettings:
        return PrivacySettings(
            central=PrivacyParams(self.epsilon, self.delta),
            local_epsilon=self.local_epsilon,
            weak_local_epsilon=self.weak_local_epsilon,
            local_delta=self.local_delta,
            clip_norm=self.clip_norm,
            accountant=AccountantConfig(self.population_size, self.cohort_size, self.max_rounds, self.delta),
        )


@dataclass(frozen=True)
class StudentSection:
    modes: tuple[str, ...] = ("baseline", "mtl")
    distill_from: tuple[str, ...] = (Regime.CENTRAL_OFFLINE.value, Regime.CENTRAL_WEAK_LOCAL.value)
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    embedding_dim: int = 100
    epochs: int = 30
    optimizer: OptimizerSection = OptimizerSection(0.05, 0.9, 5e-4, 256)
    temperature: float = 10.0
    gamma: float = 16.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str = "runs"
    threads: int = 1
    population: PopulationSection = PopulationSection()
    split: SplitSection = SplitSection()
    teacher: TeacherSection = TeacherSection()
    privacy: PrivacySection = PrivacySection()
    student: StudentSection = StudentSection()

    # fields that change where or how fast a run executes but not its results
    NON_SEMANTIC = ("output_dir", "threads")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in self.NON_SEMANTIC:
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def teacher_regimes(self) -> list[Regime]:
        """Every teacher the run trains: listed regimes plus distillation sources."""
        wanted = list(self.teacher.regimes)
        if "mtl" in self.student.modes:
            wanted += list(self.student.distill_from)
        out: list[Regime] = []
        for r in wanted:
            if Regime(r) not in out:
                out.append(Regime(r))
        return out

    def validate(self) -> None:
        p, s, t, st = self.population, self.split, self.teacher, self.student
        _check(isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
               "seed", "must be a non-negative integer")
        _check(self.threads >= 1, "threads", "must be >= 1")
        try:
            PopulationConfig(**asdict(p), seed=self.seed)
            self.privacy.build()
            t.optimizer.build()
            t.offline_optimizer.build()
            st.optimizer.build()
            DistillConfig(st.temperature, st.gamma)
        except ConfigError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        _check(0 < s.eval_speakers < p.num_speakers, "split.eval_speakers", "must leave speakers for training")
        fl_clients = p.num_speakers - s.eval_speakers
        _check(0 < s.student_speakers <= fl_clients, "split.student_speakers",
               f"must be in [1, {fl_clients}]")
        _check(0 < s.offline_speakers <= s.student_speakers, "split.offline_speakers",
               "must be in [1, student_speakers]")
        _check(0 < s.train_utterances < p.utterances_per_speaker, "split.train_utterances",
               "must leave held-out utterances")
        _check(0 < s.enroll_n < p.utterances_per_speaker, "split.enroll_n", "must leave test utterances")
        _check(s.impostor_ratio >= 0, "split.impostor_ratio", "must be >= 0")
        for r in t.regimes:
            _check(r in {x.value for x in Regime}, "teacher.regimes", f"unknown regime {r!r}")
        for r in st.distill_from:
            _check(r in {x.value for x in Regime}, "student.distill_from", f"unknown regime {r!r}")
        for m in st.modes:
            _check(m in ("baseline", "mtl"), "student.modes", f"unknown mode {m!r}")
        _check(not ("mtl" in st.modes and not st.distill_from), "student.distill_from",
               "mtl mode needs at least one teacher")
        _check(t.rounds >= 1, "teacher.rounds", "must be >= 1")
        _check(t.offline_epochs >= 0 and st.epochs >= 0, "epochs", "must be >= 0")
        federated = [r for r in self.teacher_regimes() if r in FEDERATED_REGIMES]
        if federated:
            _check(1 <= t.cohort_size <= fl_clients, "teacher.cohort_size",
                   f"cohort of {t.cohort_size} exceeds the {fl_clients} federated clients")
        if any(r in CENTRAL_REGIMES for r in federated):
            _check(t.rounds <= self.privacy.max_rounds, "teacher.rounds",
                   f"exceeds the accountant budget of {self.privacy.max_rounds} rounds")
        _check(not t.batch_norm or not federated, "teacher.batch_norm",
               "federated teachers cannot use batch norm")


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {msg}")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


_SECTIONS = {
    "population": PopulationSection,
    "split": SplitSection,
    "teacher": TeacherSection,
    "privacy": PrivacySection,
    "student": StudentSection,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls() if cls is not OptimizerSection else None
    for name, value in data.items():
        current = getattr(defaults, name, None) if defaults is not None else None
        path = f"{where}.{name}" if where else name
        if isinstance(current, OptimizerSection):
            value = _build(OptimizerSection, {**asdict(current), **(value or {})}, path)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            value = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true or false")
        elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict, seed: int | None = None) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping at the top level")
    unknown = sorted(set(data) - {"seed", "output_dir", "threads", *_SECTIONS})
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    sections = {k: _build(cls, data.get(k) or {}, k) for k, cls in _SECTIONS.items()}
    if seed is None:
        seed = data.get("seed")
    if seed is None:
        raise ConfigError("seed: required (set it in the config or pass --seed)")
    cfg = ExperimentConfig(
        seed=seed,
        output_dir=str(data.get("output_dir", "runs")),
        threads=data.get("threads", 1),
        **sections,
    )
    cfg.validate()
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data, seed)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    out = dataclasses.replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    out.validate()
    return out


def stage_seed(seed: int, stage: str) -> int:
    """Independent 63-bit seed for one pipeline stage."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# -- data ---------------------------------------------------------------------


@dataclass
class DataBundle:
    eval_x: np.ndarray
    eval_side: np.ndarray
    clients: list
    student_x: np.ndarray
    student_y: np.ndarray
    held_x: np.ndarray
    held_y: np.ndarray
    offline_x: np.ndarray
    offline_side: np.ndarray
    trials: object


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    pop = generate_population(PopulationConfig(**asdict(cfg.population), seed=cfg.seed))
    s = cfg.split
    ev, rest = pop[: s.eval_speakers], pop[s.eval_speakers:]
    stu = rest[: s.student_speakers]
    ex, eside, _ = stack(ev)
    tr = slice(0, s.train_utterances)
    held = slice(s.train_utterances, None)
    x, _, spk = stack(stu, tr)
    xh, _, spkh = stack(stu, held)
    first = stu[0].speaker_id  # student speakers are consecutive ids
    ox, oside, _ = stack(stu[: s.offline_speakers])
    trials = build_trials(ev, s.enroll_n, s.impostor_ratio, np.random.default_rng(stage_seed(cfg.seed, "trials")))
    return DataBundle(ex, eside, partition_to_clients(rest), x, spk - first, xh, spkh - first, ox, oside, trials)


# -- pipeline -----------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    run_dir: str
    version: str
    files: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None

    def write(self) -> Path:
        path = Path(self.run_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def version_string() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{VERSION}+g{sha}" if sha else VERSION


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


class _Stages:
    """Times stages, records outputs, and keeps a partial manifest on failure."""

    def __init__(self, manifest: RunManifest):
        self.m = manifest
        self.root = Path(manifest.run_dir)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.m.files.append(rel)
        return p

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            self.m.status = "failed"
            self.m.failed_stage = name
            self.m.error = f"{type(exc).__name__}: {exc}"
            self.m.write()
            raise
        finally:
            self.m.timings[name] = time.perf_counter() - t0


def _round_config(cfg: ExperimentConfig) -> RoundConfig:
    t = cfg.teacher
    return RoundConfig(cohort_size=t.cohort_size, local_epochs=t.local_epochs,
                       optimizer=t.optimizer.build(), threads=cfg.threads)


def _teacher_spec(cfg: ExperimentConfig) -> TeacherSpec:
    t = cfg.teacher
    return TeacherSpec(cfg.population.supervector_dim, cfg.population.num_side_classes,
                       tuple(t.hidden), t.batch_norm, t.init)


def train_teacher(cfg: ExperimentConfig, data: DataBundle, regime: Regime) -> TeacherArtifact:
    spec = _teacher_spec(cfg)
    eval_set = (data.eval_x, data.eval_side)
    if regime == Regime.CENTRAL_OFFLINE:
        return train_teacher_central(data.offline_x, data.offline_side, spec, cfg.teacher.offline_optimizer.build(),
                                     cfg.teacher.offline_epochs, eval_set, stage_seed(cfg.seed, "teacher_offline"))
    # one seed for every federated regime: cohorts and local training match across regimes
    return train_teacher_federated(data.clients, spec, regime, _round_config(cfg), cfg.teacher.rounds, eval_set,
                                   stage_seed(cfg.seed, "teacher_fl"), cfg.privacy.build())


def teacher_summary(art: TeacherArtifact) -> dict:
    return {"accuracy": art.accuracy, "first_round_snr": first_round_snr(art), "privacy": art.privacy_report}


def _save_teacher(stages: _Stages, art: TeacherArtifact) -> None:
    name = art.regime.value
    stages.path(f"teachers/{name}.ckpt")
    stages.path(f"teachers/{name}.json")
    art.save(stages.root / "teachers" / name)
    if art.regime != Regime.CENTRAL_OFFLINE:
        series = [RoundTelemetry(**t) for t in art.telemetry]
        write_telemetry_csv(series, stages.path(f"teachers/{name}_telemetry.csv"))
        write_telemetry_jsonl(series, stages.path(f"teachers/{name}_telemetry.jsonl"))
    else:
        write_json(stages.path(f"teachers/{name}_history.json"),
                   [{k: v for k, v in h.items() if k != "duration_ms"} for h in art.telemetry])


def _student_runs(cfg: ExperimentConfig) -> list[tuple[str, str, Regime | None]]:
    runs = []
    if "baseline" in cfg.student.modes:
        runs.append(("baseline", "baseline", None))
    if "mtl" in cfg.student.modes:
        for r in cfg.student.distill_from:
            runs.append((f"mtl_{r}", "mtl", Regime(r)))
    return runs


def run_pipeline(cfg: ExperimentConfig, run_dir) -> RunManifest:
    """Execute every stage into ``run_dir`` (created if needed)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.config_hash(), str(run_dir), version_string())
    stages = _Stages(manifest)
    try:
        _run_stages(cfg, stages)
    except Exception as exc:
        if manifest.status != "failed":
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.write()
        raise
    return manifest


def _run_stages(cfg: ExperimentConfig, stages: _Stages) -> None:
    manifest = stages.m
    with open(stages.path("config.yaml"), "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)

    with threadpool_limits(limits=1):  # single-threaded BLAS keeps reductions bit-reproducible
        data = stages.run("data", prepare_data, cfg)
        data.trials.save(stages.path("trials.npz"))
        metrics: dict = {"config_hash": manifest.config_hash, "seed": cfg.seed, "teachers": {}, "students": {}}

        teachers = {}
        for regime in cfg.teacher_regimes():
            art = stages.run(f"teacher:{regime.value}", train_teacher, cfg, data, regime)
            teachers[regime] = art
            _save_teacher(stages, art)
            metrics["teachers"][regime.value] = teacher_summary(art)

        st = cfg.student
        opt = st.optimizer.build()
        student_seed = stage_seed(cfg.seed, "student")
        num_speakers = cfg.split.student_speakers
        for name, mode, regime in _student_runs(cfg):
            spec = StudentSpec(num_speakers, cfg.population.supervector_dim,
                               tuple(st.hidden), st.embedding_dim,
                               cfg.population.num_side_classes if mode == "mtl" else None)
            kwargs = {}
            held_t = None
            if mode == "mtl":
                kwargs = dict(teacher_logits=teacher_logits(teachers[regime], data.student_x),
                              distill=DistillConfig(st.temperature, st.gamma))
                held_t = teacher_logits(teachers[regime], data.held_x)
            res = stages.run(f"student:{name}", train_student, data.student_x, data.student_y, spec, mode, opt,
                             st.epochs, student_seed, eval_set=(data.held_x, data.held_y, held_t), **kwargs)
            save_checkpoint(stages.path(f"students/{name}.ckpt"), res.net,
                            {"role": "student", "mode": mode, "teacher": regime.value if regime else None,
                             "gamma": res.gamma, "num_speakers": num_speakers})
            write_json(stages.path(f"students/{name}_history.json"), res.history)
            report = stages.run(f"eval:{name}", evaluate_sv, res.net, data.trials)
            write_json(stages.path(f"eval/{name}.json"), report.to_dict())
            report.write_roc_csv(stages.path(f"eval/{name}_roc.csv"))
            metrics["students"][name] = {
                "mode": mode,
                "teacher": regime.value if regime else None,
                "gamma": res.gamma,
                "eer": report.eer,
                "speaker_accuracy": res.speaker_accuracy,
                "side_accuracy": res.side_accuracy if mode == "mtl" else None,
            }

    write_json(stages.path("metrics.json"), metrics)
    stages.path("manifest.json")
    manifest.status = "ok"
    manifest.write()


def new_run_dir(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    """``<out>/<config hash prefix>-<UTC timestamp>``, unique within ``out``."""
    base = Path(out if out is not None else cfg.output_dir)
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    d = base / f"{cfg.config_hash()[:12]}-{stamp}"
    n = 1
    while d.exists():
        d = base / f"{cfg.config_hash()[:12]}-{stamp}-{n}"
        n += 1
    return d


def run_experiment(config_path, seed: int | None = None, out=None, threads: int | None = None) -> RunManifest:
    cfg = with_overrides(load_config(config_path, seed), threads=threads)
    return run_pipeline(cfg, new_run_dir(cfg, out))


# -- regime comparison --------------------------------------------------------

COMPARISON_COLUMNS = (
    "regime", "seeds", "final_accuracy", "first_round_snr", "epsilon", "delta", "achieved_epsilon", "local_epsilon",
)


def _claims(report: dict) -> tuple:
    central = report.get("central", {})
    local = report.get("local", {})
    return (central.get("epsilon", math.nan), central.get("delta", math.nan),
            central.get("achieved_epsilon", math.nan), local.get("epsilon", math.nan))


def compare_regimes(cfg: ExperimentConfig, regimes, seeds=None, out_dir=None) -> list[dict]:
    """Train one teacher per regime on shared data; one table row per regime.

    With several ``seeds`` accuracy and first-round SNR are seed means; the
    per-seed values go to ``regimes_by_seed.csv``.
    """
    regimes = [Regime(r) for r in regimes]
    if len(regimes) < 2:
        raise ConfigError("regimes: compare at least two")
    seeds = list(seeds) if seeds else [cfg.seed]
    per_seed = []
    with threadpool_limits(limits=1):
        for s in seeds:
            c = with_overrides(cfg, seed=s)
            c = dataclasses.replace(c, teacher=dataclasses.replace(c.teacher, regimes=tuple(r.value for r in regimes)))
            c.validate()
            data = prepare_data(c)
            for r in regimes:
                art = train_teacher(c, data, r)
                per_seed.append({"seed": s, "regime": r.value, "final_accuracy": art.accuracy,
                                 "first_round_snr": first_round_snr(art), "report": art.privacy_report})
    rows = []
    for r in regimes:
        mine = [p for p in per_seed if p["regime"] == r.value]
        eps, delta, achieved, local_eps = _claims(mine[0]["report"])
        rows.append({
            "regime": r.value,
            "seeds": len(mine),
            "final_accuracy": float(np.mean([p["final_accuracy"] for p in mine])),
            "first_round_snr": float(np.mean([p["first_round_snr"] for p in mine])),
            "epsilon": eps, "delta": delta, "achieved_epsilon": achieved, "local_epsilon": local_eps,
        })
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "regimes.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COMPARISON_COLUMNS)
            for row in rows:
                w.writerow([_cell(row[c]) for c in COMPARISON_COLUMNS])
        with open(out_dir / "regimes_by_seed.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("seed", "regime", "final_accuracy", "first_round_snr"))
            for p in per_seed:
                w.writerow([p["seed"], p["regime"], _cell(p["final_accuracy"]), _cell(p["first_round_snr"])])
    return rows


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else str(v)
