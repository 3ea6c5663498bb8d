"""Command line entry point: ``fedharness <subcommand> ...``.

Every flag has an ``FH_*`` environment fallback; flags win. Exit codes:
0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import monitor
from .data import DATASET_NAMES
from .partition import PartitionError, PartitionSpec
from .protocol import ServerConfig, TcpServer, run_client, simulate
from .protocol.client import wait_for_experiment
from .protocol.server import ServerError
from .storage import DatasetConfig, ExperimentConfig, StorageError, init_experiment, render_report

log = logging.getLogger("fedharness")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env(env, name: str, default=None):
    return env.get(f"FH_{name}", default)


def build_parser(env=os.environ) -> argparse.ArgumentParser:
    p = _Parser(prog="fedharness", description="Federated learning experiment harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="{partition,serve,client,simulate,report}", parser_class=_Parser)
    sub.required = True

    def common(sp, root=True):
        sp.add_argument("--data-dir", default=_env(env, "DATA_DIR"),
                        help="directory holding <dataset>/ raw files (env FH_DATA_DIR)")
        sp.add_argument("--seed", type=int, default=_env(env, "SEED"),
                        help="override every seed in the config (env FH_SEED)")
        if root:
            sp.add_argument("--root", default=_env(env, "ROOT", "experiments"),
                            help="experiments root directory (env FH_ROOT, default ./experiments)")

    sp = sub.add_parser("partition", help="split a dataset into client batches")
    sp.add_argument("--dataset", choices=DATASET_NAMES, default=_env(env, "DATASET", "synthetic"))
    sp.add_argument("--clients", type=int, default=_env(env, "CLIENTS", 10))
    sp.add_argument("--balance", action="store_true", default=_env(env, "BALANCE") == "1",
                    help="equal-sized client batches")
    sp.add_argument("--non-iid", action="store_true", default=_env(env, "NON_IID") == "1",
                    help="class imbalance across clients (needs --dist)")
    sp.add_argument("--dist", default=_env(env, "DIST"), help="pat:<k> or dir:<alpha>")
    sp.add_argument("--out", default=_env(env, "EXPERIMENT"), help="experiment directory to write")
    common(sp, root=False)

    sp = sub.add_parser("serve", help="run the federated server")
    sp.add_argument("--config", default=_env(env, "CONFIG"), help="experiment config file (env FH_CONFIG)")
    sp.add_argument("--metrics-addr", default=_env(env, "METRICS_ADDR"), help="host:port for /metrics")
    sp.add_argument("--sample-interval", type=float, default=float(_env(env, "SAMPLE_INTERVAL", 10.0)),
                    help="resource sampling interval in seconds")
    common(sp)

    sp = sub.add_parser("client", help="run one federated client")
    sp.add_argument("--server", default=_env(env, "SERVER"), help="server host:port (env FH_SERVER)")
    sp.add_argument("--id", type=int, default=_env(env, "CLIENT_ID"), help="client id (env FH_CLIENT_ID)")
    sp.add_argument("--experiment", default=_env(env, "EXPERIMENT"), help="experiment directory")
    sp.add_argument("--metrics-addr", default=_env(env, "METRICS_ADDR"), help="host:port for /metrics")
    sp.add_argument("--sample-interval", type=float, default=float(_env(env, "SAMPLE_INTERVAL", 10.0)))

    sp = sub.add_parser("simulate", help="run server and clients in this process")
    sp.add_argument("--config", default=_env(env, "CONFIG"), help="experiment config file (env FH_CONFIG)")
    sp.add_argument("--clients", type=int, default=_env(env, "CLIENTS"),
                    help="number of simulated clients (default: from the config)")
    sp.add_argument("--mode", choices=("det", "conc"), default=_env(env, "MODE", "det"))
    sp.add_argument("--report", default=None, help="also render CSV reports into this directory")
    sp.add_argument("--metrics-addr", default=_env(env, "METRICS_ADDR"), help="host:port for /metrics")
    common(sp)

    sp = sub.add_parser("report", help="render a finished run as CSV series")
    sp.add_argument("run", help="path to runs/run-<id>")
    sp.add_argument("--out", default=None, help="output directory (default ./<run-name>-report)")
    return p


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        s = int(args.seed)
        cfg.seed = s
        cfg.partition = dataclasses.replace(cfg.partition, seed=s)
        cfg.model = {**cfg.model, "init_seed": s}
        cfg.dataset = dataclasses.replace(cfg.dataset, seed=s)
    return cfg


def _metrics(args, registry: monitor.Registry):
    if not getattr(args, "metrics_addr", None):
        return None
    endpoint = monitor.serve_metrics(args.metrics_addr, registry)
    log.info("serving metrics on %s", endpoint.url)
    return endpoint


def cmd_partition(args) -> int:
    _require(args, "out")
    if args.dist and not args.non_iid:
        raise UsageError("--dist needs --non-iid")
    if args.non_iid and not args.dist:
        raise UsageError("--non-iid needs --dist pat:<k> or dir:<alpha>")
    seed = int(args.seed or 0)
    try:
        spec = PartitionSpec.from_flag(int(args.clients), args.balance, args.dist, seed)
    except PartitionError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    cfg = ExperimentConfig(out.name, DatasetConfig(args.dataset, seed=seed), spec, seed=seed)
    exp = init_experiment(out.parent if str(out.parent) else ".", cfg, args.data_dir)
    for c in exp.config.distribution["clients"]:
        print(f"client-{c['client']}: train={c['train_size']} test={c['test_size']}")
    return EXIT_OK


def cmd_serve(args) -> int:
    _require(args, "config")
    cfg = _load_config(args)
    exp = init_experiment(args.root, cfg, args.data_dir)
    registry = monitor.Registry()
    endpoint = _metrics(args, registry)
    server = TcpServer(ServerConfig.from_experiment(exp.config), exp, registry)
    sampler = monitor.start_sampler(args.sample_interval, exp.metrics_log("server", "0"), registry,
                                    server.counter, "server", "0")
    server.server.before_finalize.append(sampler.stop)
    print(f"listening on {server.address[0]}:{server.address[1]}, experiment {exp.path}", flush=True)
    try:
        summary = server.serve()
    finally:
        sampler.stop()
        if endpoint:
            endpoint.close()
    print(f"{summary.status}: {summary.rounds_completed} round(s), run-{summary.run_id}")
    return EXIT_OK if summary.status == "completed" else EXIT_RUNTIME


def cmd_client(args) -> int:
    _require(args, "server", "id", "experiment")
    registry = monitor.Registry()
    endpoint = _metrics(args, registry)
    # the server owns .temp until the experiment is initialized
    exp = wait_for_experiment(args.experiment, int(args.id))
    sink = exp.metrics_log("client", str(args.id))
    sampler = monitor.start_sampler(args.sample_interval, sink, registry, role="client", ident=str(args.id))
    try:
        return run_client(args.server, int(args.id), args.experiment, registry)
    finally:
        sampler.stop()
        if endpoint:
            endpoint.close()


def cmd_simulate(args) -> int:
    _require(args, "config")
    cfg = _load_config(args)
    if args.clients is not None and int(args.clients) != cfg.partition.num_clients:
        cfg.partition = dataclasses.replace(cfg.partition, num_clients=int(args.clients))
    cfg.server = dataclasses.replace(cfg.server, min_available_clients=min(cfg.server.min_available_clients,
                                                                           cfg.partition.num_clients))
    exp = init_experiment(args.root, cfg, args.data_dir)
    registry = monitor.Registry()
    endpoint = _metrics(args, registry)
    try:
        summary = simulate(ServerConfig.from_experiment(exp.config), cfg.partition.num_clients, exp,
                           "deterministic" if args.mode == "det" else "concurrent", registry)
    finally:
        if endpoint:
            endpoint.close()
    for r in summary.history:
        print(f"round {r['round']}: accuracy_distributed={r['accuracy_distributed']} "
              f"loss_distributed={r['loss_distributed']}")
    run = exp.run_path(summary.run_id)
    print(f"{summary.status}: {run}")
    if args.report:
        render_report(run, args.report)
    return EXIT_OK if summary.status == "completed" else EXIT_RUNTIME


def cmd_report(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else Path(f"{run.name}-report")
    for path in render_report(run, out):
        print(path)
    return EXIT_OK


COMMANDS = {"partition": cmd_partition, "serve": cmd_serve, "client": cmd_client,
            "simulate": cmd_simulate, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None, env=None) -> int:
    env = os.environ if env is None else env
    parser = build_parser(env)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fedharness: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StorageError, PartitionError, ServerError, OSError, ValueError) as exc:
        print(f"fedharness: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
