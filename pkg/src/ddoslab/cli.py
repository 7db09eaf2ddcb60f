"""Command-line entry point: ``ddoslab <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 data error,
4 stale or missing upstream artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .config import SCHEMA, ConfigError, load_config, toy_config
from .flowdata import DataError, SchemaError
from .toy import make_toy

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_STALE = 0, 1, 2, 3, 4

log = logging.getLogger("ddoslab")


def _global_flags(p: argparse.ArgumentParser, need_config: bool = True) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", required=need_config, metavar="PATH",
                   help="pipeline config (JSON); data paths resolve relative to its directory")
    g.add_argument("--seed", type=int, default=None,
                   help="override the config seed (takes precedence over ANOMALY_FLOW_SEED)")
    g.add_argument("--out", default="run", metavar="DIR",
                   help="workspace directory; each stage writes only below it (default: run)")
    g.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddoslab",
        description="Federated GANomaly DDoS detection: preprocess, train, federate, "
                    "generate synthetic flows, distill into external models, cross-evaluate.")
    parser.add_argument("--version", action="version", version=f"ddoslab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="clean and split every silo and the external party",
                       description="Load raw CSVs, expand flags, drop bias columns, remove "
                                   "outliers, and write train/test/validation splits.")
    _global_flags(p)

    p = sub.add_parser("train-local", help="train one GANomaly per silo on its own data",
                       description="Train a local-only model per silo and calibrate it on "
                                   "that silo's validation split.")
    _global_flags(p)

    p = sub.add_parser("federate", help="FedAvg training (simulate, serve or client)",
                       description="Federated training of one GANomaly across silos.")
    fsub = p.add_subparsers(dest="mode", required=True, metavar="MODE")
    q = fsub.add_parser("simulate", help="run every silo in this process",
                        description="In-process federation over all configured silos.")
    _global_flags(q)
    q = fsub.add_parser("serve", help="aggregation server over TCP",
                        description="Wait for silo clients, drive the rounds, write the "
                                    "global model.")
    _global_flags(q)
    q.add_argument("--bind", default="127.0.0.1:7600", metavar="HOST:PORT",
                   help="listen address (default: 127.0.0.1:7600)")
    q.add_argument("--clients", type=int, default=None,
                   help="number of clients to wait for (default: number of silos in config)")
    q.add_argument("--join-timeout", type=float, default=120.0,
                   help="seconds to wait for clients to join (default: 120)")
    q = fsub.add_parser("client", help="one silo joining a server",
                        description="Train on this silo's data each round and calibrate the "
                                    "final global model locally.")
    _global_flags(q)
    q.add_argument("--server", required=True, metavar="HOST:PORT", help="server address")
    q.add_argument("--silo", default=None,
                   help="silo id from the config (required if it lists several)")
    q.add_argument("--timeout", type=float, default=3600.0,
                   help="socket timeout in seconds (default: 3600)")

    p = sub.add_parser("generate", help="synthetic benign flows from the federated generator",
                       description="Each silo decodes its share of the batch; writes "
                                   "synthetic.csv and audit.json.")
    _global_flags(p)
    p.add_argument("--n", type=int, default=None,
                   help="number of synthetic rows (default: config generate.n)")

    p = sub.add_parser("audit", help="range audit of a processed-schema CSV",
                       description="Count per-feature range violations against the config's "
                                   "range rules.")
    _global_flags(p)
    p.add_argument("--input", default=None, metavar="CSV",
                   help="table to audit (default: the generate stage's synthetic.csv)")

    p = sub.add_parser("external", help="external models (pretrain, finetune, eval)",
                       description="Models pretrained on synthetic flows and fine-tuned by "
                                   "an external party.")
    esub = p.add_subparsers(dest="mode", required=True, metavar="MODE")
    for mode, text in (("pretrain", "pretrain every configured kind on the synthetic batch"),
                       ("finetune", "fine-tune on the external party's local rows"),
                       ("eval", "evaluate on the external test set and foreign silos")):
        _global_flags(esub.add_parser(mode, help=text, description=text))

    p = sub.add_parser("crosseval", help="every model on every silo test set",
                       description="Cross-evaluation matrix of local models and the federated "
                                   "model; JSON plus a text table.")
    _global_flags(p, need_config=False)
    p.add_argument("--models", action="append", default=None, metavar="DIR",
                   help="model directory (repeatable; default: the workspace's train-local "
                        "and federate stages)")
    p.add_argument("--datasets", default=None, metavar="DIR",
                   help="directory of <silo>/test.csv (default: the preprocess stage)")

    p = sub.add_parser("report", help="summary of a finished run",
                       description="Collect cross-evaluation, synthetic audit and external "
                                   "results into summary.json and summary.txt.")
    _global_flags(p)

    p = sub.add_parser("maketoy", help="write the toy benchmark and a ready config",
                       description="Write domains A, B, C (silos) and X (external), schema, "
                                   "range rules and config.json into --out.")
    _global_flags(p, need_config=False)

    p = sub.add_parser("schema", help="print the config JSON schema",
                       description="Print the JSON schema that configs are validated against.")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    return parser


def _run(args) -> None:
    if args.command == "schema":
        print(json.dumps(SCHEMA, indent=2))
        return
    out = Path(args.out)
    if args.command == "maketoy":
        seed = args.seed if args.seed is not None else 0
        info = make_toy(out, seed)
        cfg = toy_config(".")
        cfg["seed"] = seed
        (out / "config.json").write_text(json.dumps(cfg, indent=2))
        m = pl.RunManifest("maketoy", cfg, {"seed": seed}, {}, pl.hash_tree(out), extra=info)
        (out / pl.MANIFEST).write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True))
        print(f"toy benchmark written to {out}; next: ddoslab preprocess "
              f"--config {out / 'config.json'}")
        return
    if args.command == "crosseval" and args.config is None:
        cfg = None
    else:
        cfg = load_config(args.config, args.seed)
    report_path = None
    if args.command == "crosseval" and args.out.endswith(".json"):
        report_path, out = Path(args.out), Path(args.out).parent
    if args.command == "preprocess":
        m = pl.run_preprocess(cfg, out)
    elif args.command == "train-local":
        m = pl.run_train_local(cfg, out)
    elif args.command == "federate" and args.mode == "simulate":
        m = pl.run_federate_simulate(cfg, out)
    elif args.command == "federate" and args.mode == "serve":
        m = pl.run_federate_serve(cfg, out, args.bind, args.clients, args.join_timeout)
    elif args.command == "federate":
        m = pl.run_federate_client(cfg, out, args.server, args.silo, args.timeout)
    elif args.command == "generate":
        m = pl.run_generate(cfg, out, args.n)
    elif args.command == "audit":
        m = pl.run_audit(cfg, out, args.input)
    elif args.command == "external":
        m = {"pretrain": pl.run_external_pretrain, "finetune": pl.run_external_finetune,
             "eval": pl.run_external_eval}[args.mode](cfg, out)
    elif args.command == "crosseval":
        m = pl.run_crosseval(cfg, out, args.models, args.datasets, report_path)
        name = report_path.stem + ".txt" if report_path else "crosseval/report.txt"
        print((out / name).read_text(), end="")
    elif args.command == "report":
        m = pl.run_report(cfg, out)
        print((out / "report" / "summary.txt").read_text(), end="")
    else:  # pragma: no cover - argparse rejects unknown commands
        raise ValueError(args.command)
    log.info("%s: %d output files, digest %s", m.command, len(m.outputs), m.output_digest[:16])


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, SchemaError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except pl.StaleError as exc:
        log.error("refusing to run: %s", exc)
        return EXIT_STALE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.exception("failed: %s", exc)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
