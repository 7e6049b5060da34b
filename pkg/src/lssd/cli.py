"""Command-line entry point: gen-data, train, eval, analyze, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .analysis import EvalReport, compute_dub, evaluate
from .config import ConfigError, load_config
from .data import generate_corpus, export_corpus, load_corpus
from .model import Seq2SeqModel, load_snapshot
from .training import RunLog, run_training, write_run_dir

log = logging.getLogger("lssd")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lssd", description="Language-specific self-distillation lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and export a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="decode a split with a stored checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="overall | final | lang:<name>")
    p.add_argument("--split", choices=("dev", "test"), default="dev")

    p = sub.add_parser("analyze", help="performance-deficit report for a run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("compare", help="compare runs against the first one")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--data", help="corpus directory (defaults to the one recorded by train)")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    return parser


def _checkpoint_path(run: Path, checkpoint: str) -> Path:
    if checkpoint == "overall":
        return run / "checkpoints" / "overall_best.lssd"
    if checkpoint == "final":
        return run / "final.lssd"
    if checkpoint.startswith("lang:") and len(checkpoint) > 5:
        return run / "checkpoints" / f"best_{checkpoint[5:]}.lssd"
    raise UsageError(f"--checkpoint must be overall, final or lang:<name>, got {checkpoint!r}")


def _load_model(run: Path, checkpoint: str):
    cfg = load_config(run / "config.ini")
    path = _checkpoint_path(run, checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return cfg, Seq2SeqModel.from_snapshot(cfg.model, load_snapshot(path))


def _dev_smoothing(cfg) -> float:
    return cfg.train.label_smoothing if cfg.train.smoothed_dev_loss else 0.0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    corpus = generate_corpus(cfg.languages, cfg.payload_vocab_size, cfg.data_seed)
    export_corpus(corpus, args.out)
    print(f"wrote {len(corpus.languages)} languages, vocabulary of {len(corpus.vocab)} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus = load_corpus(args.data)
    if corpus.names != [s.name for s in cfg.languages]:
        raise ConfigError(f"corpus languages {corpus.names} do not match config")
    result = run_training(corpus, cfg.model, cfg.train)
    out = write_run_dir(result, args.out, cfg.text)
    (out / "run_info.txt").write_text(f"data = {Path(args.data).resolve()}\n")
    best = result.overall_best
    print(f"overall best epoch {best.epoch} avg dev loss {best.dev_loss:.6f}; run written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg, model = _load_model(run, args.checkpoint)
    corpus = load_corpus(args.data)
    report = evaluate(model, corpus, args.split, args.checkpoint, _dev_smoothing(cfg))
    name = args.checkpoint.replace(":", "-")
    (run / f"eval_{name}_{args.split}.txt").write_text(report.to_text())
    print(report.table())
    return EXIT_OK


def cmd_analyze(args) -> int:
    run = Path(args.run)
    report = compute_dub(RunLog.from_run_dir(run))
    text = report.to_text()
    (run / "dub_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _recorded_data(run: Path) -> str:
    info = run / "run_info.txt"
    if info.exists():
        for line in info.read_text().splitlines():
            if line.startswith("data = "):
                return line[len("data = "):]
    raise FileNotFoundError(f"{run} has no recorded data directory; pass --data")


def cmd_compare(args) -> int:
    rows = []
    names = None
    for run_arg in args.runs:
        run = Path(run_arg)
        dub = compute_dub(RunLog.from_run_dir(run))
        cfg, model = _load_model(run, "overall")
        corpus = load_corpus(args.data or _recorded_data(run))
        report = evaluate(model, corpus, args.split, "overall", _dev_smoothing(cfg))
        names = names or [le.name for le in report.languages]
        rows.append((run.name, dub.total_dub, dub.avg_dev_loss_at_best, [le.corpus_bleu for le in report.languages]))
    header = f"{'run':<20}{'DUB':>10}{'avg_dev':>10}" + "".join(f"{'d' + n:>10}" for n in names)
    print(header)
    base = rows[0][3]
    for name, dub, avg, bleus in rows:
        deltas = "".join(f"{b - b0:>+10.2f}" for b, b0 in zip(bleus, base))
        print(f"{name:<20}{dub:>10.4f}{avg:>10.4f}{deltas}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "lssd: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"lssd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
