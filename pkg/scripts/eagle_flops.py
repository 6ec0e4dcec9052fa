"""Analytic FLOPs of the EAGLE-shaped four-encoder configuration, pruned vs unpruned."""

import argparse
import json

from visprune.flops import eagle_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--json", action="store_true", help="print the full report as JSON")
    args = ap.parse_args()
    report = eagle_report()
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else report.table())


if __name__ == "__main__":
    main()
