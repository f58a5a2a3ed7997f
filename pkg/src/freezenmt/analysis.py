"""Parameter-movement and noise-sensitivity measurements.

RMS change compares two checkpoints component by component.  The noise
sensitivity instrument adds N(0, sigma^2) to every scalar of one component
of a base model and records BLEU; because the RMS of such a perturbation
tends to sigma, an observed RMS movement can be read directly off the sigma
axis of the resulting curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import derive_rng
from .params import Component

DEFAULT_SIGMAS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
DEFAULT_TRIALS = 8

RMS_HEADER = "component\trms"
RAW_HEADER = "component\tsigma\ttrial\tbleu"
CURVE_HEADER = "component\tsigma\tmean_bleu\tstd_bleu"
TABLE5_HEADER = "component\tobserved_rms\tinterpolated_bleu_drop"


class ExtrapolationError(ValueError):
    """Observed movement lies outside the sampled noise range."""


def _check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    names_a, names_b = set(a.store.names()), set(b.store.names())
    if names_a != names_b:
        raise ValueError(f"tensor names differ: {sorted(names_a ^ names_b)[:4]}")
    for p in a.store:
        q = b.store[p.name]
        if p.value.shape != q.value.shape:
            raise ValueError(f"shape mismatch for {p.name}: {p.value.shape} vs {q.value.shape}")
        if p.component != q.component:
            raise ValueError(f"component mismatch for {p.name}")


def rms_change(a: Checkpoint, b: Checkpoint, component: Component) -> float:
    """sqrt of the mean squared difference over every scalar of ``component``."""
    _check_compatible(a, b)
    sq = 0.0
    n = 0
    # sorted names: the sum must not depend on tensor iteration order
    for name in sorted(p.name for p in a.store.by_component(component)):
        d = a.store[name].value - b.store[name].value
        sq += math.fsum((d * d).ravel())
        n += d.size
    if n == 0:
        raise ValueError(f"no parameters tagged {component.label}")
    return math.sqrt(sq / n)


@dataclass
class RmsReport:
    rms: dict[Component, float]

    @classmethod
    def between(cls, a: Checkpoint, b: Checkpoint) -> "RmsReport":
        return cls({c: rms_change(a, b, c) for c in Component})

    def tsv(self, components: Sequence[Component] | None = None) -> str:
        rows = [RMS_HEADER]
        for c in components or Component:
            rows.append(f"{c.label}\t{self.rms[c]:.9g}")
        return "\n".join(rows) + "\n"


def inject_noise(ckpt: Checkpoint, component: Component, sigma: float, seed: int) -> Checkpoint:
    """Copy of ``ckpt`` with independent N(0, sigma^2) noise on one component."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError("sigma must be a finite non-negative number")
    component = Component.parse(component) if isinstance(component, str) else Component(component)
    out = ckpt.copy()
    if sigma == 0.0:
        return out
    rng = derive_rng(seed, "noise", component.label)
    for p in out.store.by_component(component):
        p.value = p.value + rng.normal(0.0, sigma, size=p.value.shape)
    return out


@dataclass
class CurvePoint:
    sigma: float
    trials: int
    mean_bleu: float
    std_bleu: float


@dataclass
class SensitivityCurve:
    component: Component
    points: list[CurvePoint]
    dataset: str = "ood.test"
    raw: list[tuple[float, int, float]] = field(default_factory=list)

    def __post_init__(self):
        sigmas = [p.sigma for p in self.points]
        if not sigmas or sigmas[0] != 0.0:
            raise ValueError("a sensitivity curve needs a sigma = 0 point first")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("sigma values must be strictly increasing")

    @property
    def baseline(self) -> float:
        return self.points[0].mean_bleu

    def tsv_rows(self) -> list[str]:
        return [f"{self.component.label}\t{p.sigma:.6g}\t{p.mean_bleu:.6f}\t{p.std_bleu:.6f}" for p in self.points]

    def raw_rows(self) -> list[str]:
        return [f"{self.component.label}\t{s:.6g}\t{t}\t{b:.6f}" for s, t, b in self.raw]


def _trial_seed(seed: int, sigma: float, trial: int) -> int:
    rng = derive_rng(seed, "trial", repr(float(sigma)), trial)
    return int(rng.integers(2**63))


def sensitivity_sweep(ckpt: Checkpoint, component: Component, sigmas: Sequence[float],
                      trials: int, evaluate: Callable[[Checkpoint], float], seed: int = 0,
                      dataset: str = "ood.test", jobs: int = 1) -> SensitivityCurve:
    """Mean/std BLEU of ``trials`` noisy copies per sigma.

    ``evaluate`` maps a checkpoint to BLEU on the chosen evaluation set.
    sigma = 0 is evaluated once: every trial would be bit-identical.
    """
    sigmas = sorted(float(s) for s in sigmas)
    if not sigmas or sigmas[0] != 0.0:
        raise ValueError("sigma list must include 0")
    if trials < 1:
        raise ValueError("trials must be positive")
    jobs_list = [(s, t) for s in sigmas for t in (range(1) if s == 0.0 else range(trials))]

    def run(item):
        s, t = item
        return evaluate(inject_noise(ckpt, component, s, _trial_seed(seed, s, t)))

    scores = _map(run, jobs_list, jobs)
    raw = []
    points = []
    for s in sigmas:
        vals = [b for (s2, t), b in zip(jobs_list, scores) if s2 == s]
        if s == 0.0:
            raw.extend((s, t, vals[0]) for t in range(trials))
            points.append(CurvePoint(s, trials, vals[0], 0.0))
        else:
            raw.extend((s, t, b) for t, b in enumerate(vals))
            points.append(CurvePoint(s, trials, float(np.mean(vals)), float(np.std(vals))))
    return SensitivityCurve(Component(component), points, dataset, raw)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    import multiprocessing as mp

    global _POOL_FN
    _POOL_FN = fn
    with mp.get_context("fork").Pool(min(jobs, len(items))) as pool:
        return pool.map(_call_pool_fn, items)


_POOL_FN = None


def _call_pool_fn(item):
    return _POOL_FN(item)


def interpolate_bleu_drop(curve: SensitivityCurve, observed_rms: float) -> float:
    """Piecewise-linear ``mean BLEU - baseline`` at sigma = ``observed_rms``."""
    if observed_rms < 0 or not math.isfinite(observed_rms):
        raise ValueError("observed RMS must be finite and non-negative")
    sig = [p.sigma for p in curve.points]
    if observed_rms > sig[-1]:
        raise ExtrapolationError(
            f"{curve.component.label}: RMS {observed_rms:.4g} is beyond the largest sigma {sig[-1]:.4g}")
    drops = [p.mean_bleu - curve.baseline for p in curve.points]
    return float(np.interp(observed_rms, sig, drops))


@dataclass
class Table5Row:
    component: Component
    observed_rms: float
    drop: float


def build_table5(full_ct: RmsReport, curves: dict[Component, SensitivityCurve]) -> list[Table5Row]:
    return [Table5Row(c, full_ct.rms[c], interpolate_bleu_drop(curves[c], full_ct.rms[c]))
            for c in Component if c in curves]


def table5_tsv(rows: Sequence[Table5Row]) -> str:
    body = [f"{r.component.label}\t{r.observed_rms:.9g}\t{r.drop:.6f}" for r in rows]
    return "\n".join([TABLE5_HEADER] + body) + "\n"


def curves_tsv(curves: Sequence[SensitivityCurve]) -> str:
    return "\n".join([CURVE_HEADER] + [r for c in curves for r in c.tsv_rows()]) + "\n"


def raw_tsv(curves: Sequence[SensitivityCurve]) -> str:
    return "\n".join([RAW_HEADER] + [r for c in curves for r in c.raw_rows()]) + "\n"
