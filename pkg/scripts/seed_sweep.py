"""Run a config over several seeds and print seed-mean teacher and student metrics.

    python scripts/seed_sweep.py --config configs/default.yaml --seeds 0,1,2,3,4 --out runs/sweep
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fedspk import experiment


def summarise(metrics: list[dict]) -> dict:
    out = {"teachers": {}, "students": {}}
    for name in metrics[0]["teachers"]:
        rows = [m["teachers"][name] for m in metrics]
        out["teachers"][name] = {
            "accuracy": float(np.mean([r["accuracy"] for r in rows])),
            "first_round_snr": float(np.mean([r["first_round_snr"] for r in rows])),
        }
    for name in metrics[0]["students"]:
        rows = [m["students"][name] for m in metrics]
        out["students"][name] = {
            "eer": float(np.mean([r["eer"] for r in rows])),
            "speaker_accuracy": float(np.mean([r["speaker_accuracy"] for r in rows])),
        }
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    metrics = []
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = experiment.load_config(args.config, seed)
        m = experiment.run_pipeline(cfg, Path(args.out) / f"seed{seed}")
        metrics.append(json.loads((Path(m.run_dir) / "metrics.json").read_text()))
        print(f"seed {seed} done in {sum(m.timings.values()):.0f}s", flush=True)
    summary = summarise(metrics)
    experiment.write_json(Path(args.out) / "summary.json", summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
