"""File-level experiment steps shared by the command line and the tests.

Experiment directory layout::

    config.ini  manifest
    data/       {ood,ind}.{train,dev,test}.{src,tgt}  bpe.src  bpe.tgt
    ood/        model.ckpt  model.log.tsv
    ct/<regime>/model.ckpt  model.log.tsv  model.sweep.tsv
    reports/    bleu.tsv  fig2.tsv  rms_full.tsv  rms_individual.tsv
                sensitivity_raw.tsv  sensitivity.tsv  table5.tsv

Every file written here is a pure function of the configuration, so
rerunning a step with the same inputs reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Sequence

from . import __version__
from . import autodiff as ad
from .analysis import (DEFAULT_SIGMAS, DEFAULT_TRIALS, RmsReport, SensitivityCurve, build_table5,
                       curves_tsv, raw_tsv, rms_change, sensitivity_sweep, table5_tsv)
from .bpe import BpeModel, train_bpe
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import PRESETS, ParallelCorpus, generate_domain_pair, read_corpus_prefix
from .evaluate import corpus_bleu, perplexity
from .model import build_model
from .params import Component
from .trainer import FreezeSpec, SweepResult, lr_sweep, train
from .vocab import Codec

log = logging.getLogger(__name__)

SPLITS = ("ood.train", "ood.dev", "ood.test", "ind.train", "ind.dev", "ind.test")


class DataMismatchError(ValueError):
    """A checkpoint was trained with different subword models than the data directory's."""


def regimes() -> list[FreezeSpec]:
    """Full continued training, then freeze-one and freeze-all-but-one per component."""
    return ([FreezeSpec.none()] + [FreezeSpec.freeze(c) for c in Component]
            + [FreezeSpec.freeze_all_but(c) for c in Component])


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data and subwords


def gen_data(out_dir, preset: str, seed: int) -> dict[str, ParallelCorpus]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
    ood, ind, sizes = PRESETS[preset]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_domain_pair(seed, ood, ind, sizes)
    for name, corpus in data.items():
        corpus.save(out / name)
    return data


def load_data(data_dir, names: Sequence[str] = SPLITS) -> dict[str, ParallelCorpus]:
    return {name: read_corpus_prefix(Path(data_dir) / name, name) for name in names}


def train_codec(data_dir, vocab_size: int) -> Codec:
    """BPE models for both sides, learned from the out-of-domain training set only."""
    ood = read_corpus_prefix(Path(data_dir) / "ood.train")
    src = train_bpe([" ".join(s) for s in ood.src], vocab_size)
    tgt = train_bpe([" ".join(t) for t in ood.tgt], vocab_size)
    src.save(Path(data_dir) / "bpe.src")
    tgt.save(Path(data_dir) / "bpe.tgt")
    return Codec(src, tgt)


def load_codec(data_dir) -> Codec:
    d = Path(data_dir)
    return Codec(BpeModel.load(d / "bpe.src"), BpeModel.load(d / "bpe.tgt"))


def ensure_codec(data_dir, vocab_size: int) -> Codec:
    d = Path(data_dir)
    if (d / "bpe.src").exists() and (d / "bpe.tgt").exists():
        return load_codec(d)
    return train_codec(d, vocab_size)


def check_codec(ckpt: Checkpoint, codec: Codec) -> None:
    want = ckpt.metadata.get("codec")
    if want is not None and want != codec.digest():
        raise DataMismatchError(f"checkpoint was trained with subword models {want}, "
                                f"data directory has {codec.digest()}")


# ---------------------------------------------------------------------------
# training


def train_ood(data_dir, cfg: ExperimentConfig, out_path) -> Checkpoint:
    codec = ensure_codec(data_dir, cfg.data.bpe_vocab)
    data = load_data(data_dir, ("ood.train", "ood.dev"))
    train_pairs = codec.encode_corpus(data["ood.train"])
    dev_pairs = codec.encode_corpus(data["ood.dev"])
    mcfg = cfg.model_config(len(codec.src_vocab), len(codec.tgt_vocab))
    store = build_model(mcfg, ad.seeded_rng(cfg.train.seed))
    meta = {"codec": codec.digest(), "config": cfg.digest(), "stage": "ood", "seed": str(cfg.train.seed)}
    res = train(store, train_pairs, dev_pairs, mcfg, cfg.ood_train_config(), FreezeSpec.none(),
                ad.seeded_rng(cfg.train.seed + 1), metadata=meta)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.best.save(out)
    out.with_name(out.stem + ".log.tsv").write_text(res.log_tsv())
    log.info("ood model: %d checkpoints, best dev ppl %.4f", len(res.log), res.best_ppl)
    return res.best


def continue_training(ood_path, data_dir, cfg: ExperimentConfig, spec: FreezeSpec, out_path,
                      lrs: Sequence[float] | None = None, jobs: int = 1) -> SweepResult:
    """Continued training under ``spec`` across the learning-rate sweep; saves the selected run."""
    ood = Checkpoint.load(ood_path)
    codec = load_codec(data_dir)
    check_codec(ood, codec)
    data = load_data(data_dir, ("ind.train", "ind.dev"))
    sweep = lr_sweep(ood, codec.encode_corpus(data["ind.train"]), codec.encode_corpus(data["ind.dev"]),
                     spec, lrs or cfg.cont.lrs, cfg.continue_config(), cfg.cont.seed, jobs)
    best = sweep.best.result
    best.best.metadata["config"] = cfg.digest()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    best.best.save(out)
    out.with_name(out.stem + ".log.tsv").write_text(best.log_tsv())
    out.with_name(out.stem + ".sweep.tsv").write_text(sweep.ledger_tsv())
    log.info("%s: lr %g, dev ppl %.4f", spec.slug, sweep.best.lr, sweep.best.dev_ppl)
    return sweep


# ---------------------------------------------------------------------------
# evaluation and reports


def bleu_on(ckpt: Checkpoint, codec: Codec, corpus: ParallelCorpus) -> float:
    return corpus_bleu(ckpt, codec, corpus)


def ppl_on(ckpt: Checkpoint, codec: Codec, corpus: ParallelCorpus) -> float:
    return perplexity(ckpt, codec.encode_corpus(corpus))


def _regime_paths(exp_dir) -> dict[str, Path]:
    ct = Path(exp_dir) / "ct"
    found = {}
    for spec in regimes():
        path = ct / spec.slug / "model.ckpt"
        if path.exists():
            found[spec.slug] = path
    return found


def bleu_table(exp_dir) -> dict[str, float]:
    """In-domain test BLEU of the unadapted model and of every finished regime."""
    exp = Path(exp_dir)
    codec = load_codec(exp / "data")
    test = load_data(exp / "data", ("ind.test",))["ind.test"]
    out = {"no-adaptation": bleu_on(Checkpoint.load(exp / "ood" / "model.ckpt"), codec, test)}
    for slug, path in _regime_paths(exp).items():
        out[slug] = bleu_on(Checkpoint.load(path), codec, test)
    return out


def fig2_tsv(scores: dict[str, float]) -> str:
    """Baselines first, then each freeze regime with its delta against full continued training."""
    full = scores.get("none")
    rows = ["regime\tkind\tbleu\tdelta_vs_full"]
    rows.append(f"no-adaptation\tbaseline\t{scores['no-adaptation']:.2f}\t")
    if full is not None:
        rows.append(f"full-continued-training\tbaseline\t{full:.2f}\t")
    for spec in regimes()[1:]:
        if spec.slug not in scores:
            continue
        kind = "freeze-one" if spec.mode == "freeze" else "freeze-all-but-one"
        delta = "" if full is None else f"{scores[spec.slug] - full:+.2f}"
        rows.append(f"{spec.slug}\t{kind}\t{scores[spec.slug]:.2f}\t{delta}")
    return "\n".join(rows) + "\n"


def bleu_tsv(scores: dict[str, float], dataset: str = "ind.test") -> str:
    rows = ["score\tmetric\tdataset\tregime"]
    rows += [f"{v:.6f}\tbleu\t{dataset}\t{k}" for k, v in scores.items()]
    return "\n".join(rows) + "\n"


def report(exp_dir) -> str:
    exp = Path(exp_dir)
    if not (exp / "ood" / "model.ckpt").exists():
        raise FileNotFoundError(f"{exp / 'ood' / 'model.ckpt'} not found")
    scores = bleu_table(exp)
    reports = exp / "reports"
    reports.mkdir(exist_ok=True)
    (reports / "bleu.tsv").write_text(bleu_tsv(scores))
    text = fig2_tsv(scores)
    (reports / "fig2.tsv").write_text(text)
    return text


def rms_reports(exp_dir) -> tuple[RmsReport, RmsReport]:
    """Movement under full continued training, and of each component adapted alone."""
    exp = Path(exp_dir)
    ood = Checkpoint.load(exp / "ood" / "model.ckpt")
    full = RmsReport.between(ood, Checkpoint.load(exp / "ct" / "none" / "model.ckpt"))
    alone = {}
    for c in Component:
        ckpt = Checkpoint.load(exp / "ct" / FreezeSpec.freeze_all_but(c).slug / "model.ckpt")
        alone[c] = rms_change(ood, ckpt, c)
    individual = RmsReport(alone)
    (exp / "reports").mkdir(exist_ok=True)
    (exp / "reports" / "rms_full.tsv").write_text(full.tsv())
    (exp / "reports" / "rms_individual.tsv").write_text(individual.tsv())
    return full, individual


def sensitivity(ckpt: Checkpoint, codec: Codec, corpus: ParallelCorpus, components: Sequence[Component],
                sigmas: Sequence[float] = DEFAULT_SIGMAS, trials: int = DEFAULT_TRIALS, seed: int = 0,
                dataset: str = "ood.test", jobs: int = 1) -> list[SensitivityCurve]:
    def evaluate(c: Checkpoint) -> float:
        return bleu_on(c, codec, corpus)

    return [sensitivity_sweep(ckpt, comp, sigmas, trials, evaluate, seed, dataset, jobs) for comp in components]


def sensitivity_reports(exp_dir, sigmas: Sequence[float] = DEFAULT_SIGMAS, trials: int = DEFAULT_TRIALS,
                        seed: int = 0, jobs: int = 1) -> tuple[list[SensitivityCurve], str]:
    """Noise curves of the out-of-domain model on its own test set, plus the Table 5 analogue."""
    exp = Path(exp_dir)
    ood = Checkpoint.load(exp / "ood" / "model.ckpt")
    codec = load_codec(exp / "data")
    test = load_data(exp / "data", ("ood.test",))["ood.test"]
    curves = sensitivity(ood, codec, test, list(Component), sigmas, trials, seed, "ood.test", jobs)
    reports = exp / "reports"
    reports.mkdir(exist_ok=True)
    (reports / "sensitivity_raw.tsv").write_text(raw_tsv(curves))
    (reports / "sensitivity.tsv").write_text(curves_tsv(curves))
    table5 = ""
    if (exp / "ct" / "none" / "model.ckpt").exists():
        full = RmsReport.between(ood, Checkpoint.load(exp / "ct" / "none" / "model.ckpt"))
        table5 = table5_tsv(build_table5(full, {c.component: c for c in curves}))
        (reports / "table5.tsv").write_text(table5)
    return curves, table5


# ---------------------------------------------------------------------------
# manifest and the whole pipeline


def write_manifest(target_dir, cfg: ExperimentConfig, command: str, data_dir=None) -> str:
    """``key=value`` record of everything needed to rerun the step that filled ``target_dir``."""
    target = Path(target_dir)
    lines = [
        f"freezenmt_version={__version__}",
        f"command={command}",
        f"config_hash={cfg.digest()}",
        f"data_seed={cfg.data.seed}",
        f"train_seed={cfg.train.seed}",
        f"continue_seed={cfg.cont.seed}",
        f"preset={cfg.data.preset}",
    ]
    data = Path(data_dir) if data_dir is not None else target / "data"
    for name in SPLITS:
        for side in ("src", "tgt"):
            path = data / f"{name}.{side}"
            if path.exists():
                lines.append(f"corpus.{name}.{side}={file_digest(path)}")
    for side in ("src", "tgt"):
        if (data / f"bpe.{side}").exists():
            lines.append(f"bpe.{side}={file_digest(data / f'bpe.{side}')}")
    text = "\n".join(lines) + "\n"
    target.mkdir(parents=True, exist_ok=True)
    (target / "manifest").write_text(text)
    return text


def run_pipeline(exp_dir, cfg: ExperimentConfig, jobs: int = 1, with_sensitivity: bool = True,
                 sigmas: Sequence[float] = DEFAULT_SIGMAS, trials: int = DEFAULT_TRIALS) -> dict:
    """Generate data, train the out-of-domain model, run all 11 regimes and write every report."""
    exp = Path(exp_dir)
    exp.mkdir(parents=True, exist_ok=True)
    cfg.save(exp / "config.ini")
    data_dir = exp / "data"
    gen_data(data_dir, cfg.data.preset, cfg.data.seed)
    train_codec(data_dir, cfg.data.bpe_vocab)
    write_manifest(exp, cfg, f"pipeline --seed {cfg.data.seed} --preset {cfg.data.preset}")
    ood_path = exp / "ood" / "model.ckpt"
    train_ood(data_dir, cfg, ood_path)
    for spec in regimes():
        continue_training(ood_path, data_dir, cfg, spec, exp / "ct" / spec.slug / "model.ckpt", jobs=jobs)
    out = {"fig2": report(exp)}
    out["rms_full"], out["rms_individual"] = rms_reports(exp)
    if with_sensitivity:
        out["curves"], out["table5"] = sensitivity_reports(exp, sigmas, trials, cfg.data.seed, jobs)
    return out


def read_bleu_tsv(path) -> dict[str, float]:
    rows = Path(path).read_text().splitlines()[1:]
    return {r.split("\t")[3]: float(r.split("\t")[0]) for r in rows}
