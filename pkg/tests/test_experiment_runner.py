import json

import pytest

from conftest import SMALL_CONFIG
from experiment_runner import (
    STATUS_COMPLETED, STATUS_FAILED, DatasetConfig, EvalSettings, load_config, parse_config, run_configured,
    run_experiment,
)
from forge_errors import ConfigError, StageError


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    base = tmp_path_factory.mktemp("experiment")
    config_file = base / "mini.toml"
    config_file.write_text(SMALL_CONFIG, encoding="utf-8")
    out = base / "bundle"
    return config_file, out, run_experiment(config_file, out=str(out))


def test_seeds_default_to_experiment_seed():
    config = parse_config({"experiment": {"seed": 7}})
    assert config.train.seed == 7
    assert config.generation.seed == 7
    override = parse_config({"experiment": {"seed": 7}, "train": {"seed": 1}}, seed=3)
    assert override.seed == 3
    assert override.train.seed == 1


@pytest.mark.parametrize("data", [
    {"dataset": {"fraction": 0}},
    {"dataset": {"fraction": 1.5}},
    {"dataset": {"kind": "nlvr2"}},
    {"dataset": {"unknown_key": 1}},
    {"experiment": {"stages": ["dataset", "fly"]}},
    {"ablation": {"fractions": [0.0, 0.5]}},
    {"eval": {"ks": [5, 1]}},
    {"generation": {"num_inversion_steps": 0}},
    {"train": {"temperature": 0}},
    {"backends": {"captioner": "magic"}},
    {"report": {"theme": "sepia"}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_external_backend_endpoint_from_environment(monkeypatch):
    monkeypatch.delenv("FORGE_CAPTIONER_ENDPOINT", raising=False)
    with pytest.raises(ConfigError):
        parse_config({"backends": {"captioner": "external_service"}})
    monkeypatch.setenv("FORGE_CAPTIONER_ENDPOINT", "http://captioner.env")
    config = parse_config({"backends": {"captioner": "external_service"}})
    assert config.backends.build().captioner.endpoint == "http://captioner.env"


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[dataset\nkind = ", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_protocol_defaults():
    fashion = EvalSettings().eval_config("fashioniq")
    assert fashion.ks == (10, 50)
    assert not fashion.exclude_reference
    cirr = EvalSettings().eval_config("cirr")
    assert cirr.ks == (1, 5, 10, 50)
    assert cirr.exclude_reference


def test_synthetic_count():
    assert DatasetConfig(synthetic_ratio=5.0).synthetic_count(1000) == 5000
    assert DatasetConfig(synthetic_triplets=3000, synthetic_ratio=5.0).synthetic_count(1000) == 3000
    assert DatasetConfig().synthetic_count(1000) == 0


def test_fingerprint_ignores_out():
    a = parse_config({}, out="runs/a")
    b = parse_config({}, out="runs/b")
    c = parse_config({}, seed=1, out="runs/a")
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_small_experiment_completes(bundle):
    _, out, report = bundle
    assert report.completed
    assert not report.reused
    assert set(report.results) == {"original", "synthetic"}
    for name in ("results.csv", "results_wide.csv", "results.txt", "comparison.txt", "ablation.csv",
                 "report.md", "report.html", "run.log", "source_images.json", "retrievals.jsonl",
                 "manifests/original.json", "manifests/reduced.json", "manifests/synthetic.json",
                 "models/original.tcir", "models/synthetic.tcir", "exports/cirr/captions/cap.rc2.train.json"):
        assert (out / name).exists(), name

    assert (out / "results.csv").read_text(encoding="utf-8").splitlines()[0] == "label,k,recall"
    assert (out / "ablation.csv").read_text(encoding="utf-8").splitlines()[0] == "fraction,arm,k,recall"
    assert len(json.loads((out / "source_images.json").read_text(encoding="utf-8"))) == 30

    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["status"] == STATUS_COMPLETED
    assert summary["stages_completed"][-1] == "report"
    assert summary["backends"]["generator"] == "toy"
    reduced_triplets = summary["stats"]["reduced"]["triplets"]
    assert summary["stats"]["synthetic"]["synthetic_triplets"] == reduced_triplets
    assert "Semillas" in (out / "run.log").read_text(encoding="utf-8")


def test_rerun_is_a_no_op(bundle):
    config_file, out, report = bundle
    before = (out / "results.csv").read_bytes()
    again = run_experiment(config_file, out=str(out))
    assert again.reused
    assert again.completed
    assert {arm: r.recall_at for arm, r in again.results.items()} == \
        {arm: r.recall_at for arm, r in report.results.items()}
    assert (out / "results.csv").read_bytes() == before


def test_stage_failure_marks_bundle(tmp_path):
    config = parse_config({
        "dataset": {"kind": "cirr", "cirr_captions": ["cap.rc2.train.json"], "cirr_splits": ["split.rc2.train.json"]},
    }, base_dir=tmp_path, out=str(tmp_path / "failed"))
    with pytest.raises(StageError) as excinfo:
        run_configured(config)
    assert excinfo.value.stage == "dataset"
    summary = json.loads((tmp_path / "failed" / "summary.json").read_text(encoding="utf-8"))
    assert summary["status"] == STATUS_FAILED
    assert summary["failure"]["stage"] == "dataset"
    assert "FileNotFoundError" in summary["failure"]["cause"]


def test_cirr_fixture_experiment_without_synthesis(fixtures_dir, tmp_path):
    config = parse_config({
        "experiment": {"stages": ["dataset", "subsample"]},
        "dataset": {"kind": "cirr", "cirr_captions": ["cirr/cap.rc2.train.json"],
                    "cirr_splits": ["cirr/split.rc2.train.json"], "fraction": 1.0},
    }, base_dir=fixtures_dir, out=str(tmp_path / "cirr"))
    report = run_configured(config)
    assert report.completed
    assert report.summary["stats"]["original"]["triplets"] == 3


def test_report_theme_from_config(fixtures_dir, tmp_path):
    config = parse_config({
        "experiment": {"stages": ["dataset", "report"]},
        "dataset": {"kind": "cirr", "cirr_captions": ["cirr/cap.rc2.train.json"],
                    "cirr_splits": ["cirr/split.rc2.train.json"], "fraction": 1.0},
        "report": {"theme": "dark"},
    }, base_dir=fixtures_dir, out=str(tmp_path / "dark"))
    assert run_configured(config).completed
    assert "#1a1a2e" in (tmp_path / "dark" / "report.html").read_text(encoding="utf-8")
