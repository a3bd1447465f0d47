"""Desk-scale end-to-end experiment: train per query mode, report held-out R-Precision.

    python3 scripts/desk_run.py --out runs/desk
    python3 scripts/desk_run.py --modes lb lf --set temperature=0.1
"""

import argparse
import json

from gicon.experiment import DESK_TRAIN, DeskSettings, run_desk


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default=None, help="directory for logs, checkpoints and desk_results.json")
    parser.add_argument("--modes", nargs="+", default=["lb", "lf", "node", "edge"])
    parser.add_argument("--ks", nargs="+", type=int, default=[10])
    parser.add_argument("--trials", type=int, default=20)
    parser.add_argument("--data-seed", type=int, default=7)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="TrainConfig override")
    args = parser.parse_args()

    train = dict(DESK_TRAIN)
    for item in args.set:
        key, _, raw = item.partition("=")
        train[key] = json.loads(raw)
    settings = DeskSettings(
        data_seed=args.data_seed, ks=tuple(args.ks), trials=args.trials, modes=tuple(args.modes), train=train
    )
    summary = run_desk(settings, out_dir=args.out)
    print(f"total {summary['total_seconds']:.0f}s")


if __name__ == "__main__":
    main()
