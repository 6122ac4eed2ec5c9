"""Command-line entry point: ``relcredit <subcommand> [--config C] [--seed S] [--threads N] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
failure, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

COMMANDS = {
    "eda": "validate tables and profile features",
    "features": "build tree and linear feature matrices",
    "build-graph": "compile the heterogeneous graph",
    "train-gnn": "train the configured GNN architectures",
    "pretrain": "contrastive pretraining, then fine-tune the encoder",
    "extract-embeddings": "write customer embeddings from a trained GNN",
    "train-tabular": "fit logistic regression and boosted trees",
    "train-hybrid": "fit boosted trees on tabular features plus embeddings",
    "evaluate": "ranking, top-k and calibration metrics",
    "fairness-audit": "subgroup and fixed-threshold audits",
    "report": "assemble the comparison report",
    "all": "run every stage in order",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP threads")
    common.add_argument("--out", help="run directory (overrides config and RELCREDIT_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="relcredit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[common])
        if name in ("train-gnn", "extract-embeddings"):
            sp.add_argument("--arch", choices=["sage", "relattn"], help="restrict to one architecture")
        if name == "evaluate":
            sp.add_argument("--scores", help="external score CSV (row_id,score,label[,group...])")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or os.environ.get("RELCREDIT_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(int(threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    # heavy imports after the thread environment is fixed
    from . import pipeline
    from .config import ConfigError, apply_seed, load_config
    from .gnn import TrainingDivergence
    from .graph import GraphValidationError
    from .ingest import DataValidationError

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        apply_seed(cfg)
        out = args.out or os.environ.get("RELCREDIT_OUT") or cfg.out
        cfg.out = out
        run = pipeline.Run(cfg, out)
        if args.command == "all":
            pipeline.run_all(run)
        else:
            kw = {}
            if args.command == "train-gnn" and args.arch:
                kw["archs"] = [args.arch]
            elif args.command == "extract-embeddings" and args.arch:
                kw["arch"] = args.arch
            elif args.command == "evaluate" and args.scores:
                kw["scores_csv"] = args.scores
            pipeline.execute(run, args.command, **kw)
    except (ConfigError, pipeline.MissingArtifact) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataValidationError, GraphValidationError) as e:
        print(f"data validation failed: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
