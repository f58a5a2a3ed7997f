"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 file format or data mismatch,
5 numerical divergence.  Failures print a single ``freezenmt: error:`` line.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

from . import __version__
from . import config as configmod
from . import pipeline
from .analysis import (DEFAULT_SIGMAS, DEFAULT_TRIALS, RmsReport, curves_tsv, raw_tsv)
from .autodiff import NumericalError
from .bpe import BpeFormatError, BpeModel, segment_sentence, train_bpe
from .checkpoint import Checkpoint, CheckpointFormatError
from .config import ConfigError
from .data import PRESETS, CorpusError, read_corpus_prefix
from .params import Component
from .trainer import DivergenceError, FreezeSpec

log = logging.getLogger("freezenmt")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_DIVERGED = 5


class UsageError(Exception):
    pass


class FormatError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_config(args) -> configmod.ExperimentConfig:
    cfg = configmod.default()
    if getattr(args, "config", None):
        try:
            cfg = configmod.load(args.config)
        except ConfigError as exc:
            raise FormatError(f"{args.config}: {exc}") from exc
    overrides = {}
    for item in getattr(args, "set", None) or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value
    return cfg.with_overrides(overrides) if overrides else cfg


def _components(text: str) -> list[Component]:
    try:
        return [Component.parse(c) for c in text.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _freeze_spec(args) -> FreezeSpec:
    if args.no_freeze:
        return FreezeSpec.none()
    if args.freeze:
        return FreezeSpec.freeze(*_components(args.freeze))
    comps = _components(args.freeze_all_but)
    if len(comps) != 1:
        raise UsageError("--freeze-all-but takes exactly one component")
    return FreezeSpec.freeze_all_but(comps[0])


def _command_line(argv) -> str:
    return "freezenmt " + " ".join(shlex.quote(a) for a in argv)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, argv):
    cfg = configmod.default().with_overrides({"data.seed": str(args.seed), "data.preset": args.preset})
    data = pipeline.gen_data(args.out_dir, args.preset, args.seed)
    pipeline.write_manifest(args.out_dir, cfg, _command_line(argv), args.out_dir)
    for name, corpus in data.items():
        log.info("%s: %d pairs", name, len(corpus))


def cmd_train_bpe(args, argv):
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    model = train_bpe(lines, args.vocab_size)
    model.save(args.model)
    log.info("%d merges, %d symbols", len(model.merges), len(model.vocab))


def cmd_apply_bpe(args, argv):
    model = BpeModel.load(args.model)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    _emit("".join(" ".join(segment_sentence(line.split(), model)) + "\n" for line in lines), args.out)


def cmd_train_ood(args, argv):
    cfg = _load_config(args)
    out = Path(args.out)
    pipeline.train_ood(args.data_dir, cfg, out)
    pipeline.write_manifest(out.parent, cfg, _command_line(argv), args.data_dir)


def cmd_continue(args, argv):
    cfg = _load_config(args)
    spec = _freeze_spec(args)
    if args.lr_sweep:
        lrs = cfg.cont.lrs
    else:
        lrs = (args.lr if args.lr is not None else cfg.cont.lrs[0],)
    out = Path(args.out)
    sweep = pipeline.continue_training(args.from_, args.data_dir, cfg, spec, out, lrs, args.jobs)
    pipeline.write_manifest(out.parent, cfg, _command_line(argv), args.data_dir)
    log.info("selected lr %g (dev ppl %.4f)", sweep.best.lr, sweep.best.dev_ppl)


def _data_dir_for(args) -> Path:
    return Path(args.data_dir) if args.data_dir else Path(args.test).parent


def cmd_eval(args, argv):
    ckpt = Checkpoint.load(args.checkpoint)
    codec = pipeline.load_codec(_data_dir_for(args))
    pipeline.check_codec(ckpt, codec)
    corpus = read_corpus_prefix(args.test)
    if args.metric == "bleu":
        score = pipeline.bleu_on(ckpt, codec, corpus)
    else:
        score = pipeline.ppl_on(ckpt, codec, corpus)
    _emit(f"score\tmetric\tdataset\n{score:.6f}\t{args.metric}\t{Path(args.test).name}\n", args.out)


def cmd_analyze_rms(args, argv):
    a, b = Checkpoint.load(args.a), Checkpoint.load(args.b)
    try:
        rep = RmsReport.between(a, b)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
    _emit(rep.tsv(), args.out)


def cmd_sensitivity(args, argv):
    ckpt = Checkpoint.load(args.checkpoint)
    codec = pipeline.load_codec(_data_dir_for(args))
    pipeline.check_codec(ckpt, codec)
    corpus = read_corpus_prefix(args.test)
    comps = list(Component) if args.component == "all" else _components(args.component)
    try:
        sigmas = sorted({0.0} | {float(s) for s in args.sigmas.split(",") if s.strip()})
    except ValueError as exc:
        raise UsageError(f"bad --sigmas: {args.sigmas}") from exc
    if sigmas[0] < 0:
        raise UsageError("sigmas must be non-negative")
    curves = pipeline.sensitivity(ckpt, codec, corpus, comps, sigmas, args.trials, args.seed,
                                  Path(args.test).name, args.jobs)
    _emit(curves_tsv(curves), args.out)
    if args.raw_out:
        _emit(raw_tsv(curves), args.raw_out)


def cmd_report(args, argv):
    _emit(pipeline.report(args.experiment_dir), args.out)


def cmd_pipeline(args, argv):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides({"data.seed": str(args.seed)})
    res = pipeline.run_pipeline(args.experiment_dir, cfg, args.jobs, not args.no_sensitivity)
    pipeline.write_manifest(args.experiment_dir, cfg, _command_line(argv))
    sys.stdout.write(res["fig2"])


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freezenmt", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment config file ([data], [model], [train], [continue])")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain corpora")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-bpe", help="learn BPE merges from a text file")
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.set_defaults(func=cmd_train_bpe)

    p = sub.add_parser("apply-bpe", help="segment a text file with a BPE model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_apply_bpe)

    p = sub.add_parser("train-ood", help="train the out-of-domain model")
    with_config(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_ood)

    p = sub.add_parser("continue", help="continued training on in-domain data")
    with_config(p)
    p.add_argument("--from", dest="from_", required=True, help="out-of-domain checkpoint")
    p.add_argument("--data-dir", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--freeze", metavar="C[,C...]")
    group.add_argument("--freeze-all-but", metavar="C")
    group.add_argument("--no-freeze", action="store_true")
    p.add_argument("--lr-sweep", action="store_true", help="try every rate in [continue] lrs")
    p.add_argument("--lr", type=float, help="single rate when not sweeping")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("eval", help="BLEU or perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="corpus prefix (reads PREFIX.src and PREFIX.tgt)")
    p.add_argument("--data-dir", help="directory with bpe.src/bpe.tgt (default: the test set's)")
    p.add_argument("--metric", choices=("bleu", "ppl"), default="bleu")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-rms", help="per-component RMS change between two checkpoints")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_rms)

    p = sub.add_parser("sensitivity", help="BLEU under Gaussian noise on one component")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--component", default="all", help="component name(s), comma-separated, or 'all'")
    p.add_argument("--sigmas", default=",".join(str(s) for s in DEFAULT_SIGMAS))
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--test", required=True, help="corpus prefix")
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--raw-out", help="also write per-trial scores here")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("report", help="consolidated BLEU table of an experiment directory")
    p.add_argument("--experiment-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every step into one experiment directory")
    with_config(p)
    p.add_argument("--experiment-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-sensitivity", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")

    def fail(code: int, msg) -> int:
        print(f"freezenmt: error: {msg}", file=sys.stderr)
        return code

    if getattr(args, "jobs", 1) < 1:
        return fail(EXIT_USAGE, "--jobs must be at least 1")
    try:
        args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        return fail(EXIT_USAGE, exc)
    except (DivergenceError, NumericalError) as exc:
        return fail(EXIT_DIVERGED, exc)
    except (FormatError, CheckpointFormatError, BpeFormatError, CorpusError, pipeline.DataMismatchError) as exc:
        return fail(EXIT_FORMAT, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return fail(EXIT_IO, f"{exc.strerror}: {exc.filename}")
    except OSError as exc:
        return fail(EXIT_IO, exc)
    except UnicodeDecodeError as exc:
        return fail(EXIT_FORMAT, f"invalid UTF-8: {exc.reason}")
    except ValueError as exc:
        return fail(EXIT_USAGE, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
