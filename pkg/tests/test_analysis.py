"""RMS movement, noise injection, sensitivity curves and the interpolated drop table."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freezenmt.analysis import (CURVE_HEADER, RAW_HEADER, RMS_HEADER, TABLE5_HEADER, CurvePoint,
                                ExtrapolationError, RmsReport, SensitivityCurve, build_table5, curves_tsv,
                                inject_noise, interpolate_bleu_drop, raw_tsv, rms_change, sensitivity_sweep,
                                table5_tsv)
from freezenmt.checkpoint import Checkpoint
from freezenmt.params import Component, Parameter, ParameterStore

from conftest import micro_checkpoint, micro_config


def _perturbed(seed):
    a = micro_checkpoint(seed)
    b = a.copy()
    rng = np.random.default_rng(seed + 100)
    for p in b.store:
        p.value = p.value + rng.normal(scale=rng.uniform(0.01, 1.0), size=p.value.shape)
    return a, b


@pytest.mark.parametrize("seed", range(5))
def test_rms_matches_direct_formula(seed):
    a, b = _perturbed(seed)
    for comp in Component:
        diffs = np.concatenate([(a.store[p.name].value - b.store[p.name].value).ravel()
                                for p in a.store.by_component(comp)])
        assert abs(rms_change(a, b, comp) - math.sqrt(np.mean(diffs ** 2))) <= 1e-12


def test_rms_symmetry_and_zero_for_identical():
    a, b = _perturbed(7)
    for comp in Component:
        assert rms_change(a, b, comp) == rms_change(b, a, comp)
        assert rms_change(a, a.copy(), comp) == 0.0


def test_rms_independent_of_tensor_order():
    a, b = _perturbed(8)
    rev = Checkpoint(ParameterStore([Parameter(p.name, p.value, p.component) for p in reversed(list(b.store))]),
                     b.config)
    for comp in Component:
        assert rms_change(a, rev, comp) == rms_change(a, b, comp)


def test_rms_positive_iff_component_changed():
    a = micro_checkpoint(1)
    b = a.copy()
    v = b.store["softmax.b"].value
    v[2] = np.nextafter(v[2], np.inf)  # a one-ulp change must still register
    rep = RmsReport.between(a, b)
    assert rep.rms[Component.SOFTMAX] > 0.0
    assert all(rep.rms[c] == 0.0 for c in Component if c != Component.SOFTMAX)
    assert rep.tsv().splitlines()[0] == RMS_HEADER
    assert len(rep.tsv().splitlines()) == 6


def test_rms_rejects_mismatched_checkpoints():
    a = micro_checkpoint()
    other = micro_checkpoint(0, hidden_dim=6)
    with pytest.raises(ValueError, match="shape"):
        rms_change(a, other, Component.ENCODER)
    fewer = Checkpoint(ParameterStore([Parameter(p.name, p.value, p.component) for p in list(a.store)[1:]]),
                       a.config)
    with pytest.raises(ValueError, match="names"):
        rms_change(a, fewer, Component.ENCODER)


def _big_component_checkpoint(n=100_000):
    cfg = micro_config()
    store = ParameterStore([Parameter("big", np.zeros(n), Component.ENCODER),
                            Parameter("other", np.arange(10.0), Component.DECODER)])
    return Checkpoint(store, cfg)


def test_noise_calibration():
    base = _big_component_checkpoint()
    sigma = 0.05
    noisy = inject_noise(base, Component.ENCODER, sigma, seed=3)
    d = noisy.store["big"].value
    n = d.size
    assert 0.049 <= d.std() <= 0.051
    assert abs(d.mean()) < 3 * sigma / math.sqrt(n)
    assert noisy.store["other"].value.tobytes() == base.store["other"].value.tobytes()
    assert not base.store["big"].value.any()  # base untouched


def test_noise_determinism_and_zero_sigma():
    base = micro_checkpoint(2)
    a = inject_noise(base, Component.DECODER, 0.1, seed=5)
    b = inject_noise(base, "decoder", 0.1, seed=5)
    c = inject_noise(base, Component.DECODER, 0.1, seed=6)
    assert a.param_digest() == b.param_digest() != c.param_digest()
    assert inject_noise(base, Component.DECODER, 0.0, seed=5).param_digest() == base.param_digest()
    for p in base.store:
        if p.component != Component.DECODER:
            assert np.array_equal(a.store[p.name].value, p.value)
    with pytest.raises(ValueError):
        inject_noise(base, Component.DECODER, -0.1, seed=0)
    with pytest.raises(ValueError):
        inject_noise(base, "attention", 0.1, seed=0)


def _score(ckpt):
    # a smooth stand-in for BLEU: falls as the decoder moves away from zero
    return 100.0 - float(np.abs(ckpt.store["decoder.combine.b"].value).sum())


def test_sensitivity_sweep_shape_and_determinism():
    base = micro_checkpoint(0)
    sig = (0.0, 0.1, 0.5, 1.0)
    curve = sensitivity_sweep(base, Component.DECODER, sig, trials=3, evaluate=_score, seed=1)
    again = sensitivity_sweep(base, Component.DECODER, sig, trials=3, evaluate=_score, seed=1)
    assert curve.tsv_rows() == again.tsv_rows()
    assert curve.raw_rows() == again.raw_rows()
    assert [p.sigma for p in curve.points] == list(sig)
    assert curve.points[0].std_bleu == 0.0
    assert len(curve.raw) == 3 * len(sig)
    means = [p.mean_bleu for p in curve.points]
    assert means == sorted(means, reverse=True)
    parallel = sensitivity_sweep(base, Component.DECODER, sig, trials=3, evaluate=_score, seed=1, jobs=2)
    assert parallel.raw_rows() == curve.raw_rows()


def test_sensitivity_sweep_validation():
    base = micro_checkpoint(0)
    with pytest.raises(ValueError):
        sensitivity_sweep(base, Component.DECODER, (0.1, 0.2), 2, _score)
    with pytest.raises(ValueError):
        sensitivity_sweep(base, Component.DECODER, (0.0, 0.2), 0, _score)


def _curve(points):
    return SensitivityCurve(Component.ENCODER, [CurvePoint(s, 1, m, 0.0) for s, m in points])


def test_interpolation_hand_values():
    curve = _curve([(0.0, 50.0), (0.1, 48.0), (0.5, 20.0)])
    assert interpolate_bleu_drop(curve, 0.0) == 0.0
    assert interpolate_bleu_drop(curve, 0.05) == pytest.approx(-1.0)
    assert interpolate_bleu_drop(curve, 0.3) == pytest.approx(-16.0)
    assert interpolate_bleu_drop(curve, 0.5) == pytest.approx(-30.0)
    with pytest.raises(ExtrapolationError):
        interpolate_bleu_drop(curve, 0.51)
    with pytest.raises(ValueError):
        interpolate_bleu_drop(curve, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=8), st.floats(0.0, 1.0))
def test_interpolation_stays_within_neighbours(means, frac):
    sig = [k / (len(means) - 1) for k in range(len(means))]
    curve = _curve(list(zip(sig, means)))
    x = frac
    drop = interpolate_bleu_drop(curve, x)
    k = min(int(x * (len(means) - 1)), len(means) - 2)
    lo, hi = sorted((means[k] - means[0], means[k + 1] - means[0]))
    assert lo - 1e-9 <= drop <= hi + 1e-9


def test_curve_validation():
    with pytest.raises(ValueError):
        _curve([(0.1, 1.0)])
    with pytest.raises(ValueError):
        _curve([(0.0, 1.0), (0.2, 1.0), (0.2, 0.5)])


def test_table5_and_tsv_headers():
    curves = {c: SensitivityCurve(c, [CurvePoint(0.0, 2, 40.0, 0.0), CurvePoint(1.0, 2, 30.0, 1.0)],
                                  raw=[(0.0, 0, 40.0), (0.0, 1, 40.0), (1.0, 0, 29.0), (1.0, 1, 31.0)])
              for c in Component}
    rep = RmsReport({c: 0.1 * (k + 1) for k, c in enumerate(Component)})
    rows = build_table5(rep, curves)
    assert [r.drop for r in rows] == pytest.approx([-1.0, -2.0, -3.0, -4.0, -5.0])
    assert table5_tsv(rows).splitlines()[0] == TABLE5_HEADER
    assert curves_tsv(list(curves.values())).splitlines()[0] == CURVE_HEADER
    raw = raw_tsv(list(curves.values())).splitlines()
    assert raw[0] == RAW_HEADER and len(raw) == 1 + 4 * 5
