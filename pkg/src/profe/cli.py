"""Command-line entry point: ``profe run ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ALGORITHMS, DATASETS, QUANT_MODES, ExperimentConfig
from .errors import ConfigError, ProfeError
from .metrics import export_metrics

log = logging.getLogger("profe")

# flag dest -> ExperimentConfig field
_FIELD = {
    "algo": "algorithm", "dataset": "dataset", "data_dir": "data_dir", "subset": "subset",
    "nodes": "nodes", "rounds": "rounds", "epochs": "epochs", "partition": "partition", "quant": "quant",
    "temperature": "temperature", "alpha_s": "alpha_s", "beta_s": "beta_s", "beta_t": "beta_t",
    "beta_limit": "beta_limit", "lr": "lr", "batch_size": "batch_size", "seed": "seed", "out": "out",
    "sequential": "sequential", "workers": "workers", "divide_protos_by_nodes": "divide_protos_by_nodes",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profe", description="Decentralized federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment", argument_default=argparse.SUPPRESS)
    run.add_argument("--algo", choices=sorted(ALGORITHMS))
    run.add_argument("--dataset", choices=DATASETS)
    run.add_argument("--data-dir", help="directory holding MNIST IDX files (default: bundled subset)")
    run.add_argument("--subset", type=int, help="stratified sample size drawn from the dataset")
    run.add_argument("--nodes", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--partition", help="iid | classes:P | dirichlet:A")
    run.add_argument("--quant", choices=sorted(QUANT_MODES))
    run.add_argument("--temperature", type=float)
    run.add_argument("--alpha-s", type=float)
    run.add_argument("--beta-s", type=float)
    run.add_argument("--beta-t", type=float)
    run.add_argument("--beta-limit", type=float)
    run.add_argument("--lr", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default: ./profe-out)")
    run.add_argument("--config", help="JSON file with config keys; flags override it")
    run.add_argument("--sequential", action="store_true", help="train nodes one at a time")
    run.add_argument("--workers", type=int)
    run.add_argument("--divide-protos-by-nodes", action="store_true",
                     help="divide global prototypes by the number of contributing nodes")
    run.add_argument("--no-timing", action="store_true", help="write elapsed_seconds as 0 (byte-stable output)")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PROFE_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def config_from_args(ns: argparse.Namespace) -> ExperimentConfig:
    overrides = {_FIELD[k]: v for k, v in vars(ns).items() if k in _FIELD}
    if getattr(ns, "no_timing", False):
        overrides["timing"] = False
    if hasattr(ns, "config"):
        return ExperimentConfig.from_json(ns.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    _configure_logging()
    try:
        cfg = config_from_args(ns)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))  # exits with status 2

    from .federation import run_experiment

    out = Path(cfg.out or "profe-out")
    try:
        result = run_experiment(cfg)
        export_metrics(result.records, out, cfg.algorithm)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    except (ProfeError, OSError) as exc:
        print(f"profe: error: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.algorithm}: final mean macro-F1 {result.final_mean_f1():.4f}, "
          f"{result.ledger.total_sent} bytes sent, {result.dropped_messages} dropped -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
