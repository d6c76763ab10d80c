"""Compare self-, semi- and fully supervised pretraining on the synthetic pitch task.

Prints one JSON line per run and a summary table. Pass --sweep to also run
the corruption-severity sweep on the semi-supervised encoder.

    python3 scripts/desk_scale_experiment.py --seeds 0 1 2 3 4 --steps 2000
"""

import argparse
import json

from semisupcon import experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--b-s", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    parser.add_argument("--sweep", action="store_true")
    args = parser.parse_args()

    table = {}
    for seed in args.seeds:
        for b_s in args.b_s:
            res = experiment.run(b_s, seed, args.steps, sweep=args.sweep and b_s == 0.5)
            table[(seed, b_s)] = res.accuracy
            record = {"seed": seed, "b_s": b_s, "accuracy": res.accuracy,
                      "auroc": res.report.auroc, "seconds": round(res.seconds, 1)}
            if res.sweep:
                record["sweep"] = [{"severity": s, "accuracy": r.top1_accuracy, "auroc": r.auroc}
                                   for s, r in res.sweep]
            print(json.dumps(record), flush=True)

    print("seed  " + "  ".join(f"b_s={b:<4}" for b in args.b_s))
    for seed in args.seeds:
        print(f"{seed:<4}  " + "  ".join(f"{table[(seed, b)]:<8.3f}" for b in args.b_s))


if __name__ == "__main__":
    main()
