"""Command-line entry point: ``python -m fedspk <command>``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dp_mech, experiment
from .dp_mech import PrivacyParams
from .errors import ConfigError, InputError
from .nn_core import load_checkpoint
from .sv_system import evaluate_sv
from .synth_data import TrialSet

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="parallel client updates per round")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedspk", description="Federated side-information distillation for speaker verification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    _common(p, True)

    p = sub.add_parser("compare-regimes", help="train one teacher per privacy regime and tabulate")
    _common(p, True)
    p.add_argument("--regimes", default=",".join(r.value for r in experiment.FEDERATED_REGIMES),
                   help="comma-separated regimes")
    p.add_argument("--seeds", help="comma-separated seeds to average over (default: the config seed)")

    p = sub.add_parser("dp-calc", help="calibrate Gaussian noise for a privacy target")
    _common(p, False)
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--sensitivity", type=float, default=1.0)
    p.add_argument("--q", type=float, help="sampling rate; default cohort/population")
    p.add_argument("--population", type=int, default=100_000_000)
    p.add_argument("--cohort", type=int, default=300)
    p.add_argument("--rounds", type=int, default=60)
    p.add_argument("--noise-multiplier", type=float,
                   help="report the accountant epsilon of this multiplier instead of calibrating")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("eval", help="re-evaluate a student checkpoint against a trial file")
    _common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True, help="trials .npz written by a run")
    return parser


def _cmd_run(args) -> int:
    manifest = experiment.run_experiment(args.config, seed=args.seed, out=args.out, threads=args.threads)
    metrics = json.loads((Path(manifest.run_dir) / "metrics.json").read_text())
    print(f"run directory: {manifest.run_dir}")
    for name, t in metrics["teachers"].items():
        print(f"teacher {name:<20} accuracy {t['accuracy']:.4f}  first-round snr {t['first_round_snr']}")
    for name, s in metrics["students"].items():
        print(f"student {name:<28} eer {s['eer']:.4f}  speaker accuracy {s['speaker_accuracy']:.4f}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = experiment.with_overrides(experiment.load_config(args.config, args.seed), threads=args.threads)
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    except ValueError as exc:
        raise ConfigError(f"--seeds: {exc}") from exc
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    try:
        regimes = [experiment.Regime(r) for r in regimes]
    except ValueError as exc:
        raise ConfigError(f"--regimes: {exc}") from exc
    out = Path(args.out) if args.out else experiment.new_run_dir(cfg) / "compare"
    rows = experiment.compare_regimes(cfg, regimes, seeds, out)
    for row in rows:
        print(f"{row['regime']:<20} accuracy {row['final_accuracy']:.4f}  first-round snr {row['first_round_snr']:.4g}")
    print(f"table: {out / 'regimes.csv'}")
    return EXIT_OK


def dp_calc(args) -> dict:
    if not 0 < args.delta < 1:
        raise ConfigError(f"--delta must be in (0, 1), got {args.delta}")
    if not args.epsilon > 0:
        raise ConfigError(f"--epsilon must be > 0, got {args.epsilon}")
    if args.rounds < 0:
        raise ConfigError(f"--rounds must be >= 0, got {args.rounds}")
    if args.q is not None:
        q = args.q
    else:
        if not 1 <= args.cohort <= args.population:
            raise ConfigError("--cohort must be between 1 and --population")
        q = args.cohort / args.population
    if not 0 < q <= 1:
        raise ConfigError(f"sampling rate must be in (0, 1], got {q}")
    pp = PrivacyParams(args.epsilon, args.delta)
    out = {
        "epsilon": args.epsilon,
        "delta": args.delta,
        "sampling_rate": q,
        "rounds": args.rounds,
        "gaussian_sigma": dp_mech.gaussian_sigma(pp, args.sensitivity),
        "sensitivity": args.sensitivity,
    }
    if args.noise_multiplier is not None:
        z = args.noise_multiplier
        out["noise_multiplier"] = z
        out["accountant_epsilon"] = dp_mech.accountant_epsilon(z, q, args.rounds, args.delta)
    else:
        z = dp_mech.accountant_sigma(pp, q, args.rounds)
        out["noise_multiplier"] = z
        out["accountant_epsilon"] = dp_mech.accountant_epsilon(z, q, args.rounds, args.delta) if z > 0 else 0.0
    return out


def _cmd_dp_calc(args) -> int:
    res = dp_calc(args)
    if args.json:
        print(json.dumps(res, indent=2, sort_keys=True))
    else:
        print(f"target (epsilon, delta)       : ({res['epsilon']}, {res['delta']})")
        print(f"analytic Gaussian sigma       : {res['gaussian_sigma']:.6g} (sensitivity {res['sensitivity']})")
        print(f"sampling rate q, rounds       : {res['sampling_rate']:.6g}, {res['rounds']}")
        print(f"accountant noise multiplier   : {res['noise_multiplier']:.6g}")
        print(f"accountant epsilon            : {res['accountant_epsilon']:.6g}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    trials = TrialSet.load(args.trials)
    report = evaluate_sv(net, trials)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "eval.json")
        report.write_roc_csv(out / "eval_roc.csv")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "compare-regimes": _cmd_compare, "dp-calc": _cmd_dp_calc, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("fedspk: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"fedspk: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"fedspk: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to the runtime exit code
        print(f"fedspk: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
