"""Shared fixtures: a micro model and a tiny generated experiment."""

from __future__ import annotations

import numpy as np
import pytest

from freezenmt import autodiff as ad
from freezenmt.checkpoint import AdamState, Checkpoint
from freezenmt.model import ModelConfig, build_model


def micro_config(**kw) -> ModelConfig:
    kw.setdefault("embed_dim", 4)
    kw.setdefault("hidden_dim", 4)
    kw.setdefault("dropout_rnn", 0.0)
    return ModelConfig(7, 7, **kw)


def micro_checkpoint(seed: int = 0, **kw) -> Checkpoint:
    cfg = micro_config(**kw)
    store = build_model(cfg, ad.seeded_rng(seed))
    return Checkpoint(store, cfg, AdamState.zeros(store), {"seed": str(seed)})


def toy_pairs(n: int = 12, seed: int = 0, vocab: int = 7) -> list[tuple[list[int], list[int]]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = [int(x) for x in rng.integers(4, vocab, size=rng.integers(2, 6))]
        out.append((src, src[::-1]))
    return out


@pytest.fixture
def micro():
    return micro_checkpoint()


@pytest.fixture(scope="session")
def tiny_experiment(tmp_path_factory):
    """Data and BPE codec of the tiny preset, generated once per session."""
    from freezenmt import pipeline

    root = tmp_path_factory.mktemp("tiny")
    data = root / "data"
    pipeline.gen_data(data, "tiny", 0)
    pipeline.train_codec(data, 120)
    return data


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS):
            terminalreporter.write_line(line)
