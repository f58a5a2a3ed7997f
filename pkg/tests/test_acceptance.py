"""Acceptance suite: one pass/fail line per criterion, printed at the end of the pytest run.

Criteria 7 to 10 and 12 run the full desk pipeline on seeds 0, 1 and 2 (about 15 min
per seed on one core) plus a rerun of seed 0. Finished runs are cached under
``FREEZENMT_ACCEPTANCE_DIR`` (default ``.acceptance_cache`` next to this package), keyed
by the configuration and a digest of the package sources, so a second test run only
repeats the determinism rerun.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import freezenmt
from freezenmt import autodiff as ad
from freezenmt import config, pipeline
from freezenmt.analysis import (DEFAULT_SIGMAS, DEFAULT_TRIALS, ExtrapolationError, inject_noise,
                                interpolate_bleu_drop, rms_change)
from freezenmt.checkpoint import Checkpoint
from freezenmt.cli import main
from freezenmt.evaluate import bleu, perplexity
from freezenmt.model import forward_loss
from freezenmt.params import Component, Parameter, ParameterStore
from freezenmt.trainer import FreezeSpec

from conftest import micro_checkpoint, micro_config, toy_pairs

SEEDS = (0, 1, 2)
REPORTS = ("bleu.tsv", "fig2.tsv", "rms_full.tsv", "rms_individual.tsv", "sensitivity.tsv",
           "sensitivity_raw.tsv", "table5.tsv")
CACHE = Path(os.environ.get("FREEZENMT_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / ".acceptance_cache"))

# a small model on the tiny preset is enough for the mechanical criteria
SMALL = ["--set", "model.embed_dim=8", "--set", "model.hidden_dim=8", "--set", "data.bpe_vocab=60",
         "--set", "train.max_checkpoints=2"]
LONG_CT = ["--set", "continue.checkpoint_interval=50", "--set", "continue.max_checkpoints=4",
           "--set", "continue.stop_patience=10", "--lr", "0.01"]
CT_STEPS = 200

RESULTS: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# criteria 1, 2 and the frozen half of 5: command-line continued training


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_cli")
    data = root / "data"
    assert main(["gen-data", "--preset", "tiny", "--seed", "3", "--out-dir", str(data)]) == 0
    ood = root / "ood" / "model.ckpt"
    assert main(["train-ood", *SMALL, "--data-dir", str(data), "--out", str(ood)]) == 0
    out = {}
    for c in Component:
        for flag, spec in (("--freeze", FreezeSpec.freeze(c)), ("--freeze-all-but", FreezeSpec.freeze_all_but(c))):
            path = root / "ct" / spec.slug / "model.ckpt"
            t0 = time.perf_counter()
            assert main(["continue", *SMALL, *LONG_CT, "--from", str(ood), "--data-dir", str(data),
                         flag, c.label, "--out", str(path)]) == 0
            rows = (path.parent / "model.log.tsv").read_text().splitlines()[1:]
            out[spec.slug] = (Checkpoint.load(path), len(rows) * 50, time.perf_counter() - t0)
    return Checkpoint.load(ood), out


def _changed(a: Checkpoint, b: Checkpoint) -> dict[str, bool]:
    return {p.name: p.value.tobytes() != b.store[p.name].value.tobytes() for p in a.store}


def test_criterion_01_freeze_exactness(cli_runs):
    ood, runs = cli_runs
    failures, worst = [], 0.0
    for c in Component:
        ckpt, steps, secs = runs[FreezeSpec.freeze(c).slug]
        worst = max(worst, secs)
        changed = _changed(ood, ckpt)
        bad = [n for n, ch in changed.items() if ch == (ood.store[n].component == c)]
        if bad or steps < CT_STEPS:
            failures.append(f"{c.label}: steps={steps} wrong={bad[:3]}")
    ok = not failures and worst < 120
    record(1, ok, f"--freeze C, {CT_STEPS} steps, slowest {worst:.0f}s" + (f"; {failures}" if failures else ""))
    assert ok, failures


def test_criterion_02_complement_exactness(cli_runs):
    ood, runs = cli_runs
    failures, worst = [], 0.0
    for c in Component:
        ckpt, steps, secs = runs[FreezeSpec.freeze_all_but(c).slug]
        worst = max(worst, secs)
        changed = _changed(ood, ckpt)
        bad = [n for n, ch in changed.items() if ch != (ood.store[n].component == c)]
        if bad or steps < CT_STEPS:
            failures.append(f"{c.label}: steps={steps} wrong={bad[:3]}")
    ok = not failures and worst < 120
    record(2, ok, f"--freeze-all-but C, slowest {worst:.0f}s" + (f"; {failures}" if failures else ""))
    assert ok, failures


# ---------------------------------------------------------------------------
# criteria 3 to 6 and 11: oracles


def test_criterion_03_gradient_check():
    ckpt = micro_checkpoint(0, init_scale=1.0)
    assert ckpt.config.src_vocab == ckpt.config.tgt_vocab == 7
    assert ckpt.config.embed_dim == ckpt.config.hidden_dim == 4
    batch = [([4, 5, 6, 4], [5, 6, 4])]
    t0 = time.perf_counter()
    worst = max(ad.finite_diff_check(lambda: forward_loss(batch, ckpt.store, ckpt.config)[0], p)
                for p in ckpt.store)
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 60
    record(3, ok, f"max relative error {worst:.2e} over {sum(p.size for p in ckpt.store)} parameters ({secs:.1f}s)")
    assert ok


def _oracle_bleu(hyps, refs):
    matches, totals = [0] * 4, [0] * 4
    for h, r in zip(hyps, refs):
        for n in range(1, 5):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
            for g in set(hg):
                matches[n - 1] += min(hg.count(g), rg.count(g))
            totals[n - 1] += len(hg)
    c, r = sum(map(len, hyps)), sum(map(len, refs))
    if c == 0 or matches[0] == 0:
        return 0.0
    logp = sum(math.log(m / t) if m else math.log(1 / (t + 1)) for m, t in zip(matches, totals))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(logp / 4)


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 5))
        vocab = list("abcde")[: int(rng.integers(2, 6))]
        refs = [list(rng.choice(vocab, size=int(rng.integers(1, 9)))) for _ in range(n)]
        hyps = [list(rng.choice(vocab, size=int(rng.integers(0, 9)))) for _ in range(n)]
        worst = max(worst, abs(bleu(hyps, refs) - _oracle_bleu(hyps, refs)))
    same = [["x", "y", "z", "w", "v"], ["p", "q", "r", "s"]]
    identical = bleu(same, same)
    ckpt = micro_checkpoint(0)
    ckpt.store["softmax.W"].value[...] = 0.0
    ckpt.store["softmax.b"].value[...] = 0.0
    ppl_err = abs(perplexity(ckpt, toy_pairs(10)) - ckpt.config.tgt_vocab)
    ok = worst <= 1e-9 and identical == 100.0 and ppl_err <= 1e-9
    record(4, ok, f"BLEU oracle max diff {worst:.1e}, identical {identical!r}, uniform ppl error {ppl_err:.1e}")
    assert ok


def test_criterion_05_rms_oracle(cli_runs):
    worst = 0.0
    for seed in range(5):
        a = micro_checkpoint(seed)
        b = a.copy()
        rng = np.random.default_rng(seed + 50)
        for p in b.store:
            p.value = p.value + rng.normal(scale=rng.uniform(0.01, 1.0), size=p.value.shape)
        for c in Component:
            d = np.concatenate([(a.store[p.name].value - b.store[p.name].value).ravel()
                                for p in a.store.by_component(c)])
            worst = max(worst, abs(rms_change(a, b, c) - math.sqrt(np.mean(d ** 2))))
    ood, runs = cli_runs
    frozen = [rms_change(ood, runs[FreezeSpec.freeze(c).slug][0], c) for c in Component]
    ok = worst <= 1e-12 and all(v == 0.0 for v in frozen)
    record(5, ok, f"max diff from direct formula {worst:.1e}; frozen components {frozen}")
    assert ok


def test_criterion_06_noise_calibration():
    n, sigma = 100_000, 0.05
    store = ParameterStore([Parameter("big", np.zeros(n), Component.ENCODER),
                            Parameter("other", np.arange(10.0), Component.DECODER)])
    base = Checkpoint(store, micro_config())
    noisy = inject_noise(base, Component.ENCODER, sigma, seed=6)
    d = noisy.store["big"].value
    unchanged = noisy.store["other"].value.tobytes() == base.store["other"].value.tobytes()
    ok = 0.049 <= d.std() <= 0.051 and abs(d.mean()) < 3 * sigma / math.sqrt(n) and unchanged
    record(6, ok, f"std {d.std():.5f}, |mean| {abs(d.mean()):.2e} (limit {3 * sigma / math.sqrt(n):.2e}), "
                  f"others unchanged {unchanged}")
    assert ok


def test_criterion_11_checkpoint_round_trip(tmp_path):
    ckpt = micro_checkpoint(11)
    ckpt.store["encoder.l1.bias"].value[0] = -0.0
    ckpt.optimizer.m["decoder.l1.bias"][0] = 1e-300
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt.save(first)
    Checkpoint.load(first).save(second)
    ok = first.read_bytes() == second.read_bytes()
    record(11, ok, f"save-load-save byte identical ({first.stat().st_size} bytes)")
    assert ok


# ---------------------------------------------------------------------------
# criteria 7 to 10 and 12: the desk pipeline on three seeds


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(freezenmt.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _run(exp: Path, seed: int) -> dict:
    cfg = config.default().with_overrides({"data.seed": str(seed)})
    if exp.exists():
        shutil.rmtree(exp)
    t0 = time.perf_counter()
    pipeline.run_pipeline(exp, cfg, with_sensitivity=False)
    t1 = time.perf_counter()
    pipeline.sensitivity_reports(exp, DEFAULT_SIGMAS, DEFAULT_TRIALS, seed)
    t2 = time.perf_counter()
    return {"train_seconds": t1 - t0, "sensitivity_seconds": t2 - t1}


@pytest.fixture(scope="module")
def desk_runs():
    key = f"{config.default().digest()}-{_source_digest()}"
    out = {}
    for seed in SEEDS:
        exp = CACHE / f"seed{seed}"
        stamp = exp / "accept.json"
        if stamp.exists() and json.loads(stamp.read_text()).get("key") == key:
            out[seed] = (exp, json.loads(stamp.read_text()))
            continue
        info = {"key": key, **_run(exp, seed)}
        stamp.write_text(json.dumps(info))
        out[seed] = (exp, info)
    return out


def _scores(exp: Path) -> dict[str, float]:
    return pipeline.read_bleu_tsv(exp / "reports" / "bleu.tsv")


def _tsv_column(path: Path) -> dict[str, float]:
    return {r.split("\t")[0]: float(r.split("\t")[1]) for r in path.read_text().splitlines()[1:]}


def test_criterion_07_adaptation_effectiveness(desk_runs):
    lines, ok = [], True
    for seed, (exp, info) in desk_runs.items():
        s = _scores(exp)
        gain = s["none"] - s["no-adaptation"]
        kept = {c.label: (s[FreezeSpec.freeze(c).slug] - s["no-adaptation"]) / gain if gain > 0 else float("nan")
                for c in Component}
        worst = min(kept, key=kept.get)
        seed_ok = gain >= 10 and all(v >= 0.7 for v in kept.values()) and info["train_seconds"] < 900
        ok &= seed_ok
        lines.append(f"seed {seed}: gain {gain:.1f}, min retained {kept[worst]:.0%} ({worst}), "
                     f"{info['train_seconds'] / 60:.1f} min")
    record(7, ok, "; ".join(lines))
    assert ok


def test_criterion_08_single_component_capacity(desk_runs):
    per = {c: statistics.median(_scores(e)[FreezeSpec.freeze_all_but(c).slug] - _scores(e)["no-adaptation"]
                                for e, _ in desk_runs.values()) for c in Component}
    ranked = sorted(per, key=per.get)
    ok = all(v > 0 for v in per.values()) and Component.TARGET_EMBEDDING in ranked[:2]
    detail = ", ".join(f"{c.label} {per[c]:+.1f}" for c in ranked)
    record(8, ok, f"median gains weakest first: {detail}")
    assert ok


def test_criterion_09_magnitude_hypothesis(desk_runs):
    full = {c: statistics.median(_tsv_column(e / "reports" / "rms_full.tsv")[c.label]
                                 for e, _ in desk_runs.values()) for c in Component}
    alone = {c: statistics.median(_tsv_column(e / "reports" / "rms_individual.tsv")[c.label]
                                  for e, _ in desk_runs.values()) for c in Component}
    wins = [c for c in Component if alone[c] >= full[c]]
    ok = len(wins) >= 4
    detail = ", ".join(f"{c.label} {alone[c]:.3f}/{full[c]:.3f}" for c in Component)
    record(9, ok, f"{len(wins)}/5 individual >= full (median individual/full): {detail}")
    assert ok


def test_criterion_10_sensitivity_sanity(desk_runs):
    from freezenmt.analysis import CurvePoint, SensitivityCurve

    lines, ok = [], True
    for seed, (exp, info) in desk_runs.items():
        s = _scores(exp)
        limit = 0.25 * (s["none"] - s["no-adaptation"])
        rms = _tsv_column(exp / "reports" / "rms_full.tsv")
        pts: dict[str, list[CurvePoint]] = {}
        for row in (exp / "reports" / "sensitivity.tsv").read_text().splitlines()[1:]:
            comp, sigma, mean, std = row.split("\t")
            pts.setdefault(comp, []).append(CurvePoint(float(sigma), DEFAULT_TRIALS, float(mean), float(std)))
        parts = []
        for c in Component:
            curve = SensitivityCurve(c, pts[c.label])
            falls = curve.points[-1].mean_bleu <= curve.baseline - 0.5
            try:
                drop = interpolate_bleu_drop(curve, rms[c.label])
            except ExtrapolationError:
                drop = -math.inf
            ok &= falls and -drop <= limit
            parts.append(f"{c.label} {drop:+.1f}{'' if falls else ' (flat)'}")
        ok &= info["sensitivity_seconds"] < 1200
        lines.append(f"seed {seed}: limit {limit:.1f}, drops " + ", ".join(parts)
                     + f", sweep {info['sensitivity_seconds'] / 60:.1f} min")
    record(10, ok, "; ".join(lines))
    assert ok


def test_criterion_12_determinism(desk_runs, tmp_path):
    exp0 = desk_runs[0][0]
    _run(tmp_path / "rerun", 0)
    diff = [n for n in REPORTS if (exp0 / "reports" / n).read_bytes() != (tmp_path / "rerun" / "reports" / n).read_bytes()]
    ok = not diff
    record(12, ok, f"seed 0 rerun, {len(REPORTS)} reports byte identical" if ok else f"differing reports: {diff}")
    assert ok
