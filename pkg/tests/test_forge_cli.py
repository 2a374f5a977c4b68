import json

import pytest

from conftest import SMALL_CONFIG
from forge import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main
from triplet_core import Provenance, load_manifest, validate_manifest


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config = base / "mini.toml"
    config.write_text(SMALL_CONFIG, encoding="utf-8")
    out = base / "world"
    assert main(["toy", "--config", str(config), "--out", str(out)]) == EXIT_OK
    return config, out / "manifest.json"


def test_toy_writes_valid_manifest(world):
    _, manifest_path = world
    manifest = load_manifest(manifest_path)
    assert validate_manifest(manifest) == []
    assert manifest.stats.train_triplets > 0


def test_stats_exit_codes(world, tmp_path, capsys):
    _, manifest_path = world
    assert main(["stats", "--manifest", str(manifest_path)]) == EXIT_OK
    assert '"triplets"' in capsys.readouterr().out
    assert main(["stats", "--manifest", str(tmp_path / "missing.json")]) == EXIT_FAILED


def test_caption_perturb_generate_chain(world, tmp_path):
    config, manifest_path = world
    out = tmp_path / "chain"
    assert main(["caption", "--config", str(config), "--manifest", str(manifest_path), "--out", str(out)]) == EXIT_OK
    captions = [json.loads(line) for line in (out / "captions.jsonl").read_text(encoding="utf-8").splitlines()]
    assert len(captions) == len(load_manifest(manifest_path).images)

    assert main(["perturb", "--config", str(config), "--captions", str(out / "captions.jsonl"),
                 "--out", str(out)]) == EXIT_OK
    edits = (out / "edits.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(edits) == len(captions)

    assert main(["generate", "--config", str(config), "--manifest", str(manifest_path),
                 "--edits", str(out / "edits.jsonl"), "--out", str(out)]) == EXIT_OK
    synthetic = load_manifest(out / "synthetic_manifest.json")
    assert validate_manifest(synthetic) == []
    assert len(synthetic.triplets) == len(edits)
    assert all(t.provenance == Provenance.SYNTHETIC for t in synthetic.triplets)


def test_synth_train_eval(world, tmp_path, capsys):
    config, manifest_path = world
    syn = tmp_path / "syn"
    assert main(["synth", "--config", str(config), "--manifest", str(manifest_path), "-n", "6",
                 "--out", str(syn)]) == EXIT_OK
    assert len(load_manifest(syn / "synthetic_manifest.json").triplets) == 6

    model_dir = tmp_path / "model"
    assert main(["train", "--config", str(config), "--manifest", str(manifest_path),
                 "--out", str(model_dir)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--config", str(config), "--manifest", str(manifest_path),
                 "--checkpoint", str(model_dir / "model.tcir"), "--out", str(model_dir)]) == EXIT_OK
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["label", "R@1", "R@5", "R@10", "R@50"]
    assert (model_dir / "results.csv").read_text(encoding="utf-8").startswith("label,k,recall")


def test_run_requires_config():
    assert main(["run"]) == EXIT_CONFIG


def test_invalid_config_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset]\nfraction = 0\n", encoding="utf-8")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_ablate_rejects_fractions_out_of_range(world, tmp_path):
    config, manifest_path = world
    out = tmp_path / "ablate"
    code = main(["ablate", "--config", str(config), "--manifest", str(manifest_path),
                 "--synthetic", str(manifest_path), "--fractions", "0.5", "1.5", "--out", str(out)])
    assert code == EXIT_CONFIG
    assert not out.exists()
