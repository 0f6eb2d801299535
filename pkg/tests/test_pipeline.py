import csv
import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microt import cli, cost, data, pipeline
from microt.pipeline import PipelineConfig, PipelineError, STAGES

CSV_REPORTS = ("split_report.csv", "device_train.csv", "calibration.csv", "routing_log.csv", "ratio_sweep.csv",
               "summary.csv", "cost_report.csv")


def tiny_config(seed=0) -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.run.seed = seed
    cfg.data.cloud_samples = cfg.data.local_samples = 180
    cfg.data.image_size = 12
    cfg.teacher.arch = "conv:6:3 relu conv:8:3:2 relu gap"
    cfg.teacher.proj_dim = 8
    cfg.student.arch = "conv:4:3 relu conv:6:3 relu conv:8:3:2 relu gap"
    cfg.ssl.epochs = cfg.distill.epochs = cfg.joint.epochs = 1
    cfg.split.probe_epochs = 5
    cfg.device.epochs = 3
    cfg.quant.calibration_samples = 32
    return cfg


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipeline.run_pipeline(tiny_config(), out)
    return out


def test_config_round_trip_defaults():
    cfg = PipelineConfig()
    text = cfg.to_ini()
    again = PipelineConfig.from_ini(text)
    assert again == cfg and again.to_ini() == text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-6, 10, allow_nan=False), st.booleans(), st.integers(1, 500),
       st.text(alphabet="abcdefgh:0123 ", min_size=1, max_size=30).map(str.strip).filter(bool))
def test_config_round_trip_property(seed, lr, enabled, epochs, arch):
    cfg = PipelineConfig()
    cfg.run.seed = seed
    cfg.device.lr = lr
    cfg.quant.enabled = enabled
    cfg.ssl.epochs = epochs
    cfg.student.arch = arch
    parsed = PipelineConfig.from_ini(cfg.to_ini())
    assert parsed == cfg
    assert PipelineConfig.from_ini(parsed.to_ini()) == parsed


def test_config_requires_seed_and_known_keys(tmp_path):
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[data]\nlocal = synthetic\n")
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[run]\nseed = 1\n[device]\nmomentum = 0.9\n")
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[run]\nseed = 1\n[gpu]\nn = 1\n")
    with pytest.raises(FileNotFoundError):
        PipelineConfig.from_ini("[run]\nseed = 1\n[data]\nlocal = idx:missing-images\n", base_dir=tmp_path)


def test_seed_override():
    assert PipelineConfig().with_seed(9).seed == 9


def test_all_artifacts_written(run_dir):
    for name in ("config.ini", "teacher.mcrt", "embeddings.memb", "student.mcrt", "joint.mcrt", "part.mcrt",
                 "remainder.mcrt", "part.mcrq", "remainder.mcrq", "part_features.mfea", "full_features.mfea",
                 "part_clf.mclf", "full_clf.mclf", "none_clf.mclf", "summary.txt") + CSV_REPORTS:
        assert (run_dir / name).is_file(), name
    assert PipelineConfig.load(run_dir / "config.ini") == tiny_config()


def test_reports_are_lf_utf8_csv(run_dir):
    for name in CSV_REPORTS:
        raw = (run_dir / name).read_bytes()
        assert b"\r" not in raw
        rows = list(csv.reader(l for l in raw.decode("utf-8").splitlines() if not l.startswith("#")))
        assert len({len(r) for r in rows}) == 1, name


def test_summary_rows_and_savings_consistency(run_dir):
    lines = [l for l in (run_dir / "summary.csv").read_text().splitlines() if not l.startswith("#")]
    rows = {r["method"]: r for r in csv.DictReader(lines)}
    assert {"none", "head-only", "part-only", "stage-decision"} <= rows.keys()
    cost_lines = [l for l in (run_dir / "cost_report.csv").read_text().splitlines() if not l.startswith("#")]
    base = float(rows["head-only"]["expected_macs"])
    for rep in csv.DictReader(cost_lines):
        assert float(rep["savings_percent"]) == pytest.approx(cost.savings(base, float(rep["expected_macs"])))
        assert float(rep["expected_macs"]) == pytest.approx(
            float(cost.expected_cost(int(rep["mac_part"]), int(rep["mac_full"]), float(rep["ratio"]))))


def test_sweep_has_three_ratios(run_dir):
    lines = (run_dir / "ratio_sweep.csv").read_text().splitlines()
    assert len(lines) == 4
    ratios = [float(r["ratio"]) for r in csv.DictReader(lines)]
    assert ratios == sorted(ratios)


def test_stage_rerun_is_idempotent_and_leaves_upstream_alone(run_dir):
    before = {p.name: digest(p) for p in run_dir.iterdir()}
    pipe = pipeline.Pipeline(tiny_config(), run_dir)
    for name in ("split", "quantize", "calibrate", "infer", "report"):
        pipe.run_stage(name)
    after = {p.name: digest(p) for p in run_dir.iterdir()}
    assert after == before


def test_missing_artifact_names_stage(tmp_path):
    with pytest.raises(PipelineError) as err:
        pipeline.Pipeline(tiny_config(), tmp_path).run_stage("distill")
    assert err.value.stage == "distill" and "teacher.mcrt" in str(err.value)
    with pytest.raises(ValueError):
        pipeline.Pipeline(tiny_config(), tmp_path).run_stage("train")


def test_unquantized_pipeline_skips_quantize(tmp_path, run_dir):
    cfg = dataclasses.replace(tiny_config(), quant=pipeline.QuantSection(enabled=False))
    for name in ("part.mcrt", "remainder.mcrt"):
        (tmp_path / name).write_bytes((run_dir / name).read_bytes())
    pipeline.run_pipeline(cfg, tmp_path, STAGES[4:])
    assert not (tmp_path / "part.mcrq").exists()
    assert (tmp_path / "summary.csv").exists()


def test_idx_local_dataset(tmp_path):
    x, y = data.synthetic_images(data.LOCAL_CLASSES, 120, 5, size=20)
    data.write_idx(tmp_path / "local-images", (x[:, 0] * 255).astype(np.uint8))
    data.write_idx(tmp_path / "local-labels", y.astype(np.uint8))
    text = tiny_config().to_ini().replace("local = synthetic", "local = idx:local-images;local-labels")
    (tmp_path / "run.ini").write_text(text)
    cfg = PipelineConfig.load(tmp_path / "run.ini")
    handle = pipeline.load_source(cfg.data.local, "local", cfg, tmp_path)
    assert handle.x.shape == (120, 1, 12, 12) and handle.classes == 6


def test_cli_init_config_and_run(tmp_path, capsys, run_dir):
    assert cli.main(["init-config"]) == 0
    text = capsys.readouterr().out
    assert PipelineConfig.from_ini(text) == PipelineConfig()

    (tmp_path / "run.ini").write_text(tiny_config().to_ini())
    out = tmp_path / "out"
    out.mkdir()
    for name in ("part.mcrq", "remainder.mcrq", "part_clf.mclf", "full_clf.mclf", "none_clf.mclf"):
        (out / name).write_bytes((run_dir / name).read_bytes())
    assert cli.main(["run", "--config", str(tmp_path / "run.ini"), "--stage", "calibrate", "--out", str(out)]) == 0
    assert cli.main(["infer", "--config", str(tmp_path / "run.ini"), "--out", str(out)]) == 0
    assert (out / "routing_log.csv").read_bytes() == (run_dir / "routing_log.csv").read_bytes()


def test_cli_reports_stage_errors(tmp_path, capsys):
    (tmp_path / "run.ini").write_text(tiny_config().to_ini())
    code = cli.main(["report", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path / "empty")])
    assert code != 0 and "[report]" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "nope.ini")]) == 2
