"""``gecko`` command line: bench, train, eval-stream, recall.

Exit codes: 0 success, 2 config error, 3 data error, 4 non-finite values.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import harness, plotting
from .checkpoint import CheckpointError, content_hash, load_checkpoint, read_header
from .data import DataError, load_bytes
from .harness import ConfigError, RunConfig
from .numerics import NonFiniteError

log = logging.getLogger("gecko")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE = 0, 2, 3, 4


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _names(text):
    return [x for x in text.split(",") if x]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="gecko", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="time attention patterns against sequence length")
    b.add_argument("--patterns", type=_names, default=["chunk", "swa", "sca"])
    b.add_argument("--lengths", type=_ints, required=True)
    b.add_argument("--chunk-size", type=int, default=64)
    b.add_argument("--dim", type=int, default=128)
    b.add_argument("--zdim", type=int, default=128)
    b.add_argument("--vdim", type=int, default=256)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the toy language model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="raw byte corpus (not needed for the passkey task)")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", required=True)

    e = sub.add_parser("eval-stream", help="position-wise NLL and PPL by context length")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--max-len", type=int, required=True)
    e.add_argument("--buckets", type=_ints, required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("recall", help="passkey accuracy by distance in chunks")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--distances", type=_ints, default=[1, 2, 4, 8])
    r.add_argument("--trials", type=int, default=200)
    r.add_argument("--seed", type=int, default=1234)
    r.add_argument("--out", required=True)
    return p


def _load(path):
    try:
        return load_checkpoint(path), content_hash(path), read_header(path)[0]
    except FileNotFoundError as e:
        raise DataError(f"{path}: checkpoint not found") from e
    except CheckpointError as e:
        raise DataError(str(e)) from e


def cmd_bench(a):
    run = RunConfig("bench", {k: v for k, v in vars(a).items() if k != "func"})
    rows = harness.bench(a.patterns, a.lengths, a.chunk_size, a.dim, a.zdim, a.vdim, a.repeats)
    harness.write_csv(a.out, rows, run)
    if not a.no_plots:
        plotting.plot_bench(rows, a.out)


def cmd_train(a):
    cfg, ocfg, tcfg = harness.load_config(a.config)
    data = load_bytes(a.data) if a.data else None
    if tcfg.task == "lm" and data is None:
        raise ConfigError("--data is required for language-model training")
    run = RunConfig("train", {k: v for k, v in vars(a).items() if k != "func"},
                    {**cfg.to_dict(), "seed": a.seed}, ocfg.to_dict(), vars(tcfg))
    model, rows = harness.train(cfg, ocfg, tcfg, data, a.steps, a.seed,
                                callback=lambda m: log.info("step %d loss %.4f", m["step"], m["loss"]))
    digest = harness.save_trained(model, a.out, tcfg)
    harness.write_csv(a.metrics, rows, run, digest)
    if not a.no_plots:
        plotting.plot_train(rows, a.metrics)


def cmd_eval(a):
    model, digest, header = _load(a.ckpt)
    data = load_bytes(a.data)
    run = RunConfig("eval-stream", {k: v for k, v in vars(a).items() if k != "func"},
                    header["config"])
    pos, buckets, summary = harness.eval_stream(model, data, a.max_len, a.buckets)
    if summary["skipped"]:
        log.warning("skipped %d documents shorter than one chunk", summary["skipped"])
    out = Path(a.out)
    bucket_path = out.with_name(out.stem + ".buckets.csv")
    harness.write_csv(out, pos, run, digest)
    harness.write_csv(bucket_path, buckets, run, digest)
    summary_path = out.with_name(out.stem + ".summary.csv")
    harness.write_csv(summary_path, [summary], run, digest)
    if not a.no_plots:
        plotting.plot_eval(pos, buckets, out, model.cfg.chunk)


def cmd_recall(a):
    model, digest, header = _load(a.ckpt)
    train_cfg = header.get("extra", {}).get("train", {})
    run = RunConfig("recall", {k: v for k, v in vars(a).items() if k != "func"},
                    header["config"], train=train_cfg or None)
    rows = harness.recall(model, a.distances, a.trials,
                          keys=train_cfg.get("passkey_keys", 16),
                          context_chunks=train_cfg.get("passkey_chunks", 10), seed=a.seed)
    harness.write_csv(a.out, rows, run, digest)
    if not a.no_plots:
        plotting.plot_recall(rows, a.out)


COMMANDS = {"bench": cmd_bench, "train": cmd_train, "eval-stream": cmd_eval, "recall": cmd_recall}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NonFiniteError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NONFINITE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
