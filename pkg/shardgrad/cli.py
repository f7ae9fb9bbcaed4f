"""Batch entry point: ``python -m shardgrad {train,cost,regret,verify} [flags]``.

Exit codes: 0 success, 1 check or run failure, 2 usage or configuration error.
CSV goes to ``--out`` (stdout when omitted); logs go to stderr.
"""
from __future__ import annotations

import argparse
import asyncio
import csv
import io
import logging
import sys
from pathlib import Path

from shardgrad.config import RunConfig, build_run_config, get_settings, load_config_file
from shardgrad.costmodel import CostParams, sweep
from shardgrad.data_io import load_corpus, load_idx
from shardgrad.data_parallel import DataParallelTrainer, ModelParallelGradientSource, ReplicaConfig
from shardgrad.errors import ConfigError, ShardgradError
from shardgrad.logging_config import setup_logging
from shardgrad.model_parallel import ModelParallelTrainer, MpConfig
from shardgrad.network import NetworkSpec, cnn_spec, fc_spec, init_params, lstm_spec, rnn_spec
from shardgrad.optim import OptimizerConfig
from shardgrad.regret_lab import ConvexProblemConfig, experiment
from shardgrad.tensor import Rng
from shardgrad.training import EpochRecord, Trainer
from shardgrad.verify import run_all

logger = logging.getLogger(__name__)

TRAIN_HEADER = ["epoch", "train_loss", "test_accuracy", "wall_ms", "messages", "data_units"]
COST_HEADER = ["F", "K", "N1", "N2_paper", "N2_measured_model", "N3", "N", "T_comm"]
REGRET_HEADER = ["tau", "T", "regret", "bound_thm1", "bound_thm2", "bound_thm3"]
VERIFY_HEADER = ["suite", "check", "expected", "measured", "status"]


# ── Output ───────────────────────────────────────────────────────────────────

def fmt(value) -> str:
    """CSV cell: blank for None, integers without a decimal point, floats with repr precision."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def write_csv(path: Path | None, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
        logger.info("Wrote %d rows to %s", len(rows), path)


# ── Commands ─────────────────────────────────────────────────────────────────

def _build_spec(cfg: RunConfig, vocab: int | None) -> NetworkSpec:
    if cfg.net == "fc":
        return fc_spec(cfg.sizes)
    if cfg.net == "cnn":
        return cnn_spec()
    builder = rnn_spec if cfg.net == "rnn" else lstm_spec
    return builder(vocab, cfg.hidden_sizes)


def _train_records(cfg: RunConfig) -> list[EpochRecord]:
    recurrent = cfg.net in ("rnn", "lstm")
    if recurrent and cfg.mode != "none":
        raise ConfigError(f"{cfg.net} nets train in mode=none only, got mode={cfg.mode}")
    if cfg.mode in ("model", "hybrid") and cfg.net != "fc":
        raise ConfigError(f"mode={cfg.mode} needs an fc net, got {cfg.net}")
    mp_config = None
    if cfg.mode in ("model", "hybrid"):
        mp_config = MpConfig(workers=cfg.workers, exchange=cfg.exchange, deterministic=cfg.deterministic,
                             seed=cfg.seed)

    opt_config = OptimizerConfig.from_run(cfg)
    rng = Rng(cfg.seed)
    if recurrent:
        corpus_path = cfg.corpus or get_settings().corpus
        if corpus_path is None:
            raise ConfigError(f"--corpus is required for {cfg.net} nets")
        corpus = load_corpus(corpus_path)
        spec = _build_spec(cfg, corpus.vocab_size)
        trainer = Trainer(spec, opt_config, truncation=cfg.truncation, seq_len=cfg.seq_len, seed=cfg.seed)
        return trainer.fit(init_params(spec, rng), corpus, epochs=cfg.epochs)

    if cfg.data is None or cfg.labels is None:
        raise ConfigError("--data and --labels are required for image nets")
    train = load_idx(cfg.data, cfg.labels)
    test = load_idx(cfg.test_data, cfg.test_labels) if cfg.test_data and cfg.test_labels else None
    spec = _build_spec(cfg, None)
    if spec.b[0] != train.rows * train.cols:
        raise ConfigError(f"net input size {spec.b[0]} does not match {train.rows}x{train.cols} images")
    params = init_params(spec, rng)

    if cfg.mode == "none":
        return Trainer(spec, opt_config, seed=cfg.seed).fit(params, train, test, cfg.epochs)
    if cfg.mode == "model":
        trainer = ModelParallelTrainer(spec, mp_config, opt_config, seed=cfg.seed)
        _, records = asyncio.run(trainer.fit(params, train, test, cfg.epochs))
        return records

    replica_config = ReplicaConfig(replicas=cfg.replicas, n_fetch=cfg.n_fetch, n_push=cfg.n_push,
                                   deterministic=cfg.deterministic)
    factory = None
    if cfg.mode == "hybrid":
        def factory(initial):
            return [ModelParallelGradientSource(spec, initial, mp_config, opt_config) for _ in range(cfg.replicas)]
    trainer = DataParallelTrainer(spec, replica_config, opt_config, source_factory=factory)
    _, records, _ = asyncio.run(trainer.fit(params, train, test, cfg.epochs))
    return records


def cmd_train(cfg: RunConfig) -> int:
    records = _train_records(cfg)
    rows = []
    for r in records:
        wall_ms = 0 if cfg.deterministic else round(r.wall_ms, 3)
        rows.append([r.epoch, r.train_loss, r.test_accuracy, wall_ms, r.messages, r.data_units])
    write_csv(cfg.out, TRAIN_HEADER, rows)
    return 0


def cmd_cost(cfg: RunConfig) -> int:
    base = CostParams(F=1, M=cfg.m, b=cfg.sizes, t_lat=cfg.t_lat, t_data=cfg.t_data)
    rows = [[bd.F, bd.K, bd.N1, bd.N2_paper, bd.N2_measured_model, bd.N3, bd.N, bd.T_comm]
            for bd in sweep(base, cfg.f_list)]
    write_csv(cfg.out, COST_HEADER, rows)
    return 0


def cmd_regret(cfg: RunConfig) -> int:
    if cfg.iterations <= max(cfg.taus, default=0):
        raise ConfigError(f"--iterations {cfg.iterations} must exceed every tau {cfg.taus}")
    problem = ConvexProblemConfig(dim=cfg.dim, lam=cfg.lam, radius=cfg.radius, center_radius=cfg.center_radius)
    results = experiment(problem, cfg.taus, cfg.iterations, seeds=cfg.seeds, lr_scale=cfg.lr_scale,
                         base_seed=cfg.seed)
    rows = [[r.tau, r.T, r.regret, r.bounds.thm1, r.bounds.thm2, r.bounds.thm3] for r in results]
    write_csv(cfg.out, REGRET_HEADER, rows)
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    suites = asyncio.run(run_all(cfg.quick, cfg.inject_grad_error, cfg.seed))
    rows, failed = [], []
    for suite in suites:
        for check in suite.checks:
            status = "PASS" if check.passed else "FAIL"
            rows.append([suite.suite, check.name, check.expected, check.measured, status])
            print(f"{status}  {suite.suite}/{check.name}: expected {fmt(check.expected)}, "
                  f"measured {fmt(check.measured)}")
            if not check.passed:
                failed.append(f"{suite.suite}/{check.name}")
    print(f"{len(rows)} checks, {len(failed)} failed")
    for name in failed:
        print(f"FAILED: {name}")
    if cfg.out is not None:
        write_csv(cfg.out, VERIFY_HEADER, rows)
    return 1 if failed else 0


COMMANDS = {"train": cmd_train, "cost": cmd_cost, "regret": cmd_regret, "verify": cmd_verify}


# ── Argument parsing ─────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--net", choices=["fc", "cnn", "rnn", "lstm"])
    common.add_argument("--mode", choices=["none", "data", "model", "hybrid"])
    common.add_argument("--workers", type=int, help="model-parallel worker count F")
    common.add_argument("--replicas", type=int, help="data-parallel replica count")
    common.add_argument("--exchange", choices=["hypercube", "master_relay"])
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="seeded scheduling; wall_ms is written as 0")
    common.add_argument("--n-fetch", type=int, dest="n_fetch")
    common.add_argument("--n-push", type=int, dest="n_push")
    common.add_argument("--sizes", help="comma-separated layer sizes, e.g. 784,480,160,10")
    common.add_argument("--hidden-sizes", dest="hidden_sizes", help="recurrent hidden sizes, e.g. 200,100")
    common.add_argument("--optimizer", choices=["sgd", "momentum", "rmsprop"])
    common.add_argument("--lr", type=float)
    common.add_argument("--momentum", type=float)
    common.add_argument("--rho", type=float, help="rmsprop decay")
    common.add_argument("--eps", type=float, help="rmsprop denominator floor")
    common.add_argument("--batch", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--seq-len", type=int, dest="seq_len")
    common.add_argument("--truncation", type=int)
    common.add_argument("--seed", type=int, help="falls back to SHARDGRAD_SEED")
    common.add_argument("--data", type=Path, help="IDX image file")
    common.add_argument("--labels", type=Path, help="IDX label file")
    common.add_argument("--test-data", type=Path, dest="test_data")
    common.add_argument("--test-labels", type=Path, dest="test_labels")
    common.add_argument("--corpus", type=Path, help="UTF-8 text for character models")
    common.add_argument("--out", type=Path, help="CSV output path (default: stdout)")
    common.add_argument("--f-list", dest="f_list", help="comma-separated process counts")
    common.add_argument("--m", type=int, help="training examples per epoch")
    common.add_argument("--t-lat", type=float, dest="t_lat")
    common.add_argument("--t-data", type=float, dest="t_data")
    common.add_argument("--taus", help="comma-separated delays")
    common.add_argument("--iterations", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--lambda", type=float, dest="lam")
    common.add_argument("--radius", type=float)
    common.add_argument("--center-radius", type=float, dest="center_radius")
    common.add_argument("--lr-scale", type=float, dest="lr_scale")
    common.add_argument("--seeds", type=int)
    common.add_argument("--quick", action="store_true", default=None, help="smaller verification grids")
    common.add_argument("--inject-grad-error", type=float, dest="inject_grad_error",
                        help="perturb distributed gradients by this amount (verification test hook)")

    parser = argparse.ArgumentParser(prog="shardgrad", description="Distributed network training experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a network and write per-epoch CSV")
    sub.add_parser("cost", parents=[common], help="communication cost sweep over F")
    sub.add_parser("regret", parents=[common], help="delayed-SGD regret against its bounds")
    sub.add_parser("verify", parents=[common], help="run the self-check suites")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging()
    flags = {k: v for k, v in vars(args).items() if k != "config"}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_run_config(file_values, flags)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        print(f"shardgrad: error: {exc}", file=sys.stderr)
        return 2

    try:
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        print(f"shardgrad: error: {exc}", file=sys.stderr)
        return 2
    except ShardgradError:
        logger.exception("%s run failed", cfg.command)
        return 1
