"""Optimization and the continued-training protocol."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import AdamState, Checkpoint, rng_from_text, rng_state_text
from .evaluate import corpus_cross_entropy
from .model import ModelConfig, forward_loss
from .params import Component, ParameterStore

log = logging.getLogger(__name__)

FULL_SWEEP = (0.1, 0.01, 0.001, 0.0001, 0.00001)

Pairs = Sequence[tuple[Sequence[int], Sequence[int]]]


class DivergenceError(ArithmeticError):
    """Training loss or gradients became non-finite."""


# ---------------------------------------------------------------------------
# freezing


@dataclass(frozen=True)
class FreezeSpec:
    mode: str = "none"
    components: frozenset[Component] = frozenset()

    def __post_init__(self):
        if self.mode not in ("none", "freeze", "freeze_all_but"):
            raise ValueError(f"unknown freeze mode {self.mode!r}")
        if self.mode == "none" and self.components:
            raise ValueError("mode 'none' takes no components")
        if self.mode == "freeze" and not self.components:
            raise ValueError("freeze needs at least one component")
        if self.mode == "freeze_all_but" and len(self.components) != 1:
            raise ValueError("freeze_all_but takes exactly one component")

    @classmethod
    def none(cls) -> "FreezeSpec":
        return cls()

    @classmethod
    def freeze(cls, *components: Component) -> "FreezeSpec":
        return cls("freeze", frozenset(components))

    @classmethod
    def freeze_all_but(cls, component: Component) -> "FreezeSpec":
        return cls("freeze_all_but", frozenset([component]))

    @classmethod
    def parse(cls, text: str) -> "FreezeSpec":
        """Inverse of :attr:`slug`: ``none``, ``freeze-encoder+decoder``, ``only-softmax``."""
        if text == "none":
            return cls.none()
        if text.startswith("freeze-"):
            return cls.freeze(*(Component.parse(c) for c in text[len("freeze-"):].split("+")))
        if text.startswith("only-"):
            return cls.freeze_all_but(Component.parse(text[len("only-"):]))
        raise ValueError(f"bad freeze regime {text!r}")

    def frozen(self) -> set[Component]:
        if self.mode == "none":
            return set()
        if self.mode == "freeze":
            return set(self.components)
        return set(Component) - set(self.components)

    @property
    def slug(self) -> str:
        names = "+".join(c.label for c in sorted(self.components))
        return {"none": "none", "freeze": f"freeze-{names}", "freeze_all_but": f"only-{names}"}[self.mode]


def apply_freeze(store: ParameterStore, spec: FreezeSpec) -> ParameterStore:
    frozen = spec.frozen()
    for p in store:
        p.trainable = p.component not in frozen
    return store


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParameterStore, state: AdamState, lr: float, cfg: AdamConfig = AdamConfig()) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place.

    Frozen parameters and their moments are not touched.
    """
    for p in store:
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p in store:
        if not p.trainable:
            continue
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_gradients(store: ParameterStore, threshold: float | None) -> None:
    if threshold is None:
        return
    for p in store:
        if p.trainable:
            np.clip(p.grad, -threshold, threshold, out=p.grad)


# ---------------------------------------------------------------------------
# schedule


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` checkpoints without a new best."""

    def __init__(self, factor: float, patience: int):
        if not 0.0 < factor < 1.0:
            raise ValueError("reduce factor must lie in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be positive")
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def observe(self, value: float) -> bool:
        """Record one checkpoint; True when the rate should be reduced now."""
        if value < self.best:
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False


def lr_plateau_schedule(history: Iterable[float], factor: float, patience: int) -> list[tuple[int, float]]:
    """``(checkpoint, cumulative multiplier)`` for each reduction; checkpoints count from 1."""
    sched = PlateauSchedule(factor, patience)
    events = []
    mult = 1.0
    for k, value in enumerate(history, start=1):
        if sched.observe(value):
            mult *= factor
            events.append((k, mult))
    return events


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0003
    lr_reduce_factor: float = 0.7
    batch_size: int = 32
    checkpoint_interval: int | None = None   # batches; None = half an epoch
    patience: int = 2
    stop_patience: int = 5
    max_checkpoints: int = 60
    dropout: float | None = None             # None = keep the model config's value
    label_smoothing: float | None = None
    clip_gradient: float | None = 1.0
    reset_optimizer: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.lr_reduce_factor < 1.0:
            raise ValueError("lr reduce factor must lie in (0, 1)")
        if self.batch_size < 1 or self.max_checkpoints < 1:
            raise ValueError("batch size and max checkpoints must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        text = repr(sorted(dataclasses.asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LogRow:
    checkpoint: int
    lr: float
    train_loss: float
    dev_ppl: float
    is_best: bool

    def tsv(self) -> str:
        return f"{self.checkpoint}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.dev_ppl:.6f}\t{int(self.is_best)}"


LOG_HEADER = "checkpoint\tlr\ttrain_loss\tdev_ppl\tis_best"


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[LogRow] = field(default_factory=list)
    steps: int = 0
    initial_loss: float = math.nan

    @property
    def best_ppl(self) -> float:
        return float(self.best.metadata["dev_ppl"])

    def log_tsv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.tsv() for r in self.log]) + "\n"


def dev_perplexity(store: ParameterStore, config: ModelConfig, dev: Pairs) -> float:
    total, tokens = corpus_cross_entropy(store, config, dev)
    return math.exp(total / tokens)


def _batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator,
             pool: int = 16) -> list[np.ndarray]:
    """Shuffled batches of similar-length sentences.

    Sentences are shuffled, sorted by length inside pools of ``pool``
    batches, cut into batches, and the batch order is shuffled again.
    """
    order = rng.permutation(len(lengths))
    out = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        chunk = order[start : start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out.extend(chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size))
    return [out[k] for k in rng.permutation(len(out))]


def train(store: ParameterStore, corpus: Pairs, dev: Pairs, model_config: ModelConfig,
          config: TrainConfig, freeze_spec: FreezeSpec, rng: np.random.Generator,
          optimizer: AdamState | None = None, metadata: dict[str, str] | None = None) -> TrainResult:
    """Train ``store`` in place; return the checkpoint with the lowest dev perplexity.

    Stops after ``stop_patience`` checkpoints without improvement or after
    ``max_checkpoints``.  Raises :class:`DivergenceError` on a non-finite loss.
    """
    if not corpus or not dev:
        raise ValueError("training and development sets must be non-empty")
    mcfg = model_config
    if config.dropout is not None:
        mcfg = mcfg.replace(dropout_rnn=config.dropout)
    smoothing = mcfg.label_smoothing if config.label_smoothing is None else config.label_smoothing
    apply_freeze(store, freeze_spec)
    opt = AdamState.zeros(store) if optimizer is None else optimizer
    n_batches = math.ceil(len(corpus) / config.batch_size)
    interval = config.checkpoint_interval or max(1, math.ceil(n_batches / 2))
    drop_rng = rng if mcfg.dropout_rnn > 0 else None
    lengths = np.array([max(len(s), len(t)) for s, t in corpus])

    schedule = PlateauSchedule(config.lr_reduce_factor, config.patience)
    lr = config.lr
    result = TrainResult(best=None)  # type: ignore[arg-type]
    best_ppl = math.inf
    since_best = 0
    step = 0
    loss_sum = 0.0
    loss_tokens = 0
    ckpt = 0
    while True:
        for idx in _batches(lengths, config.batch_size, rng):
            batch = [corpus[k] for k in idx]
            store.zero_grad()
            try:
                with ad.Tape():
                    loss, ntok = forward_loss(batch, store, mcfg, rng=drop_rng, smoothing=smoothing)
                    ad.backward(loss)
            except ad.NumericalError as exc:
                raise DivergenceError(f"training diverged at step {step + 1}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at step {step + 1}")
            if step == 0:
                result.initial_loss = value
            clip_gradients(store, config.clip_gradient)
            adam_step(store, opt, lr)
            step += 1
            loss_sum += value * ntok
            loss_tokens += ntok
            if step % interval:
                continue

            ckpt += 1
            try:
                ppl = dev_perplexity(store, model_config, dev)
            except ad.NumericalError as exc:
                raise DivergenceError(f"dev evaluation diverged: {exc}") from exc
            is_best = ppl < best_ppl
            result.log.append(LogRow(ckpt, lr, loss_sum / loss_tokens, ppl, is_best))
            log.debug("checkpoint %d lr %.3g loss %.4f dev ppl %.4f", ckpt, lr, loss_sum / loss_tokens, ppl)
            loss_sum, loss_tokens = 0.0, 0
            if is_best:
                best_ppl = ppl
                since_best = 0
                meta = dict(metadata or {})
                meta.update({
                    "checkpoint": str(ckpt),
                    "step": str(step),
                    "dev_ppl": repr(ppl),
                    "lr": repr(lr),
                    "freeze": freeze_spec.slug,
                    "train_config": config.digest(),
                    "rng_state": rng_state_text(rng),
                })
                result.best = Checkpoint(store.copy(), model_config, opt.copy(), meta)
            else:
                since_best += 1
            if schedule.observe(ppl):
                lr *= config.lr_reduce_factor
            if since_best >= config.stop_patience or ckpt >= config.max_checkpoints:
                result.steps = step
                return result


def continued_training(ood: Checkpoint, ind_train: Pairs, ind_dev: Pairs, base_config: TrainConfig,
                       freeze_spec: FreezeSpec, seed: int = 0) -> TrainResult:
    """Initialize from the out-of-domain parameters and train on in-domain data.

    Dropout and label smoothing are switched off.  Adam starts from zero
    moments unless ``base_config.reset_optimizer`` is False.
    """
    store = ood.store.copy()
    cfg = base_config.replace(dropout=0.0, label_smoothing=0.0)
    model_cfg = ood.config.replace(dropout_rnn=0.0, label_smoothing=0.0)
    if cfg.reset_optimizer or ood.optimizer is None:
        opt = AdamState.zeros(store)
    else:
        opt = ood.optimizer.copy()
    meta = {"parent": ood.param_digest()[:16], "seed": str(seed)}
    for key in ("data_hash", "codec"):
        if key in ood.metadata:
            meta[key] = ood.metadata[key]
    rng = ad.seeded_rng(seed)
    return train(store, ind_train, ind_dev, model_cfg, cfg, freeze_spec, rng, opt, meta)


@dataclass
class SweepRun:
    lr: float
    dev_ppl: float
    checkpoints: int
    diverged: bool
    result: TrainResult | None = None

    def tsv(self) -> str:
        return f"{self.lr:.6g}\t{self.dev_ppl:.6f}\t{self.checkpoints}\t{int(self.diverged)}"


SWEEP_HEADER = "lr\tdev_ppl\tcheckpoints\tdiverged"


@dataclass
class SweepResult:
    runs: list[SweepRun]
    best: SweepRun

    def ledger_tsv(self) -> str:
        return "\n".join([SWEEP_HEADER] + [r.tsv() for r in self.runs]) + "\n"


def _sweep_branch(args) -> SweepRun:
    ood, ind_train, ind_dev, cfg, spec, seed = args
    try:
        res = continued_training(ood, ind_train, ind_dev, cfg, spec, seed)
    except DivergenceError:
        return SweepRun(cfg.lr, math.inf, 0, True)
    return SweepRun(cfg.lr, res.best_ppl, len(res.log), False, res)


def lr_sweep(ood: Checkpoint, ind_train: Pairs, ind_dev: Pairs, freeze_spec: FreezeSpec,
             lrs: Sequence[float] = FULL_SWEEP, base_config: TrainConfig | None = None,
             seed: int = 0, jobs: int = 1) -> SweepResult:
    """Continued training at each rate; keep the lowest dev perplexity (ties: smaller rate)."""
    if not lrs:
        raise ValueError("empty learning-rate list")
    base = base_config or TrainConfig(lr_reduce_factor=0.5)
    tasks = [(ood, ind_train, ind_dev, base.replace(lr=lr), freeze_spec, seed) for lr in lrs]
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(jobs, len(tasks))) as pool:
            runs = pool.map(_sweep_branch, tasks)
    else:
        runs = [_sweep_branch(t) for t in tasks]
    ok = [r for r in runs if not r.diverged]
    if not ok:
        raise DivergenceError("every learning rate in the sweep diverged")
    best = min(ok, key=lambda r: (r.dev_ppl, r.lr))
    return SweepResult(runs, best)
