"""Profile the real credit tables: validation, EDA summary and graph size.

    python scripts/real_data_eda.py /path/to/hcdr_csvs --out runs/real
"""
import argparse
import json
import logging

from relcredit import pipeline
from relcredit.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("directory", help="folder with the six CSV tables")
    ap.add_argument("--out", default="runs/real")
    ap.add_argument("--skip-graph", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = load_config(None)
    cfg.data.source, cfg.data.directory = "directory", args.directory
    run = pipeline.Run(cfg, args.out)
    pipeline.execute(run, "eda")
    summary = pipeline.read_json(run.path("eda", "summary.json"))
    print(json.dumps(summary, indent=2))
    if not args.skip_graph:
        pipeline.execute(run, "build-graph")
        nodes = pipeline.read_json(run.path("graph_report.json"))["nodes"]
        for t, n in nodes.items():
            print(f"{t:>20}: {n:,}")
        print(f"{'total':>20}: {sum(nodes.values()):,}")


if __name__ == "__main__":
    main()
