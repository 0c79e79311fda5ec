"""Train every synthetic member, blend, average strategies A-E, print a GAP table.

    python scripts/run_suite.py --workdir runs/suite [--seed 7]
"""

import argparse
import dataclasses
import json
import os

from vle.suite import SuiteConfig, member_names, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/suite")
    ap.add_argument("--seed", type=int, help="override the synthetic data seed")
    args = ap.parse_args()
    config = SuiteConfig()
    if args.seed is not None:
        config.spec = dataclasses.replace(config.spec, seed=args.seed)
    results = run_suite(args.workdir, config, log=lambda _: None)

    print(f"{'member':24s}  GAP@{config.k}")
    for name, gap in results.items():
        print(f"{name:24s}  {gap:.5f}")
    best_member = max(results[m] for m in member_names("e"))
    print(f"\nbest strategy-E member {best_member:.5f}")
    with open(os.path.join(args.workdir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump({"spec": config.spec.to_dict(), "gap": results}, fh, indent=1)


if __name__ == "__main__":
    main()
