import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from bwta_engine.diagnostics import convergence_report
from bwta_engine.loader import TrainConfigLoader
from bwta_engine.models import ScheduleKind, Strategy
from bwta_engine.schedule import schedule_from_config
from bwta_engine.trainer import build_model, build_task, train, transition_spikes, write_metrics_csv

SEEDS = (0, 1, 2)
STRATEGIES = (Strategy.OURS, Strategy.MEAN, Strategy.NONE)
SCHEDULES = (ScheduleKind.LEVELWISE, ScheduleKind.BITWISE)


def run_one(base_config, seed, strategy, schedule_kind, output_dir):
    config = replace(base_config, seed=seed, strategy=strategy, schedule=schedule_kind,
                     stages=None, metrics_csv=None, checkpoint_dir=None)

    schedule = schedule_from_config(config)
    state = train(build_model(config), build_task(config), schedule, config)

    name = f"{schedule_kind.value}_{strategy.value}_seed{seed}.csv"
    write_metrics_csv(state.history, os.path.join(output_dir, name))

    spikes = transition_spikes(state)
    return {
        "schedule": schedule_kind.value,
        "strategy": strategy.value,
        "seed": seed,
        "final_acc": state.history[-1].acc,
        "mean_spike": float(np.mean(spikes)) if spikes else 0.0,
        "non_converged": convergence_report(state).fraction_non_converged,
    }


def summarize(results, key):
    groups = {}
    for row in results:
        groups.setdefault((row["schedule"], row["strategy"]), []).append(row[key])
    return {group: float(np.mean(values)) for group, values in groups.items()}


def main(config_path="configs/train_demo.cfg", output_dir="runs/compare"):
    os.makedirs(output_dir, exist_ok=True)

    print("[1] Loading base config...")
    base_config = TrainConfigLoader(config_path).load()

    print("[2] Training every schedule/strategy/seed combination...")
    results = []
    for schedule_kind in SCHEDULES:
        for strategy in STRATEGIES:
            for seed in SEEDS:
                row = run_one(base_config, seed, strategy, schedule_kind, output_dir)
                print(f"    {schedule_kind.value:9s} {strategy.value:5s} seed={seed} "
                      f"acc={row['final_acc']:.4f} spike={row['mean_spike']:.4f} "
                      f"non-converged={row['non_converged']:.3f}")
                results.append(row)

    summary_path = os.path.join(output_dir, "summary.csv")
    with open(summary_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(results[0]))
        writer.writeheader()
        writer.writerows(results)

    print("[3] Averages over seeds:")
    spikes = summarize(results, "mean_spike")
    stale = summarize(results, "non_converged")
    accs = summarize(results, "final_acc")
    for group in sorted(spikes):
        print(f"    {group[0]:9s} {group[1]:5s} acc={accs[group]:.4f} "
              f"spike={spikes[group]:.4f} non-converged={stale[group]:.3f}")

    print(f"[✔] Comparison complete! Results saved to {summary_path}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Compare transition strategies and schedules over seeds.")
    parser.add_argument("--config", default="configs/train_demo.cfg")
    parser.add_argument("--output-dir", default="runs/compare")
    args = parser.parse_args()
    main(args.config, args.output_dir)
