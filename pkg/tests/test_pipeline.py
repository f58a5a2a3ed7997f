"""Whole-pipeline wiring on the tiny preset: report files, manifest and byte-level reproducibility."""

from pathlib import Path

import pytest

from freezenmt import config, pipeline
from freezenmt.checkpoint import Checkpoint

REPORTS = ("bleu.tsv", "fig2.tsv", "rms_full.tsv", "rms_individual.tsv", "sensitivity.tsv",
           "sensitivity_raw.tsv", "table5.tsv")


def _tiny_config():
    return config.default().with_overrides({
        "data.preset": "tiny", "data.bpe_vocab": "60", "model.embed_dim": "8", "model.hidden_dim": "8",
        "train.max_checkpoints": "3", "continue.max_checkpoints": "2", "continue.lrs": "0.01, 0.001",
    })


def _run(root):
    return pipeline.run_pipeline(root, _tiny_config(), sigmas=(0.0, 0.5, 5.0), trials=2)


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return (a, _run(a)), (b, _run(b))


def test_all_reports_written(two_runs):
    (root, res), _ = two_runs
    for name in REPORTS:
        assert (root / "reports" / name).stat().st_size > 0
    fig2 = res["fig2"].splitlines()
    assert len(fig2) == 1 + 12
    assert [r.split("\t")[1] for r in fig2[1:3]] == ["baseline", "baseline"]
    assert sum(r.split("\t")[1] == "freeze-one" for r in fig2) == 5
    assert sum(r.split("\t")[1] == "freeze-all-but-one" for r in fig2) == 5
    for slug in [s.slug for s in pipeline.regimes()]:
        assert (root / "ct" / slug / "model.ckpt").exists()
        assert (root / "ct" / slug / "model.sweep.tsv").exists()


def test_reports_are_byte_identical_across_reruns(two_runs):
    (a, _), (b, _) = two_runs
    for name in REPORTS:
        assert (a / "reports" / name).read_bytes() == (b / "reports" / name).read_bytes(), name
    assert (a / "ood" / "model.ckpt").read_bytes() == (b / "ood" / "model.ckpt").read_bytes()


def test_manifest_records_inputs(two_runs):
    (root, _), _ = two_runs
    kv = dict(line.split("=", 1) for line in (root / "manifest").read_text().splitlines())
    cfg = _tiny_config()
    assert kv["config_hash"] == cfg.digest()
    assert kv["data_seed"] == "0" and kv["preset"] == "tiny"
    assert kv["corpus.ind.test.tgt"] == pipeline.file_digest(root / "data" / "ind.test.tgt")
    assert "bpe.src" in kv
    assert config.load(root / "config.ini") == cfg


def test_bpe_ignores_in_domain_text(tmp_path):
    data = tmp_path / "d"
    pipeline.gen_data(data, "tiny", 0)
    first = pipeline.train_codec(data, 60).digest()
    (data / "ind.train.src").write_text("zzzz qqqq\n" * 50)
    assert pipeline.train_codec(data, 60).digest() == first


def test_codec_mismatch_detected(two_runs):
    (root, _), _ = two_runs
    ckpt = Checkpoint.load(root / "ood" / "model.ckpt")
    ckpt.metadata["codec"] = "0" * 16
    with pytest.raises(pipeline.DataMismatchError):
        pipeline.check_codec(ckpt, pipeline.load_codec(root / "data"))


def test_unknown_preset(tmp_path):
    with pytest.raises(ValueError):
        pipeline.gen_data(tmp_path, "huge", 0)


def test_read_bleu_tsv(two_runs):
    (root, _), _ = two_runs
    scores = pipeline.read_bleu_tsv(root / "reports" / "bleu.tsv")
    assert set(scores) == {"no-adaptation"} | {s.slug for s in pipeline.regimes()}
    assert all(0 <= v <= 100 for v in scores.values())
    assert Path(root / "reports" / "table5.tsv").read_text().count("\n") == 6
