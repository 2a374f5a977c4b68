"""Propiedades de extremo a extremo sobre el mundo de juguete (lentas)."""

import statistics

import numpy as np
import pytest

from ablation_harness import ARM_ORIGINAL, ARM_SYNTHETIC, run_ablation
from caption_perturber import validate_edit
from conftest import SMALL_CONFIG
from dataset_io import merge, subsample_images
from experiment_runner import run_experiment
from retrieval_eval import EvalConfig, evaluate
from synthesis_pipeline import SynthesisBackends, SynthesisConfig, select_source_images, synthesize_triplets
from toy_cir_model import TrainConfig, make_train_fn
from toy_world import build_toy_world, component_region, load_png, read_sidecar, render_scene
from triplet_core import Split, split_manifest

pytestmark = pytest.mark.slow

TRAIN = TrainConfig(epochs=20, batch_size=32)
EVAL = EvalConfig(ks=(1, 5, 10, 50))


@pytest.fixture(scope="module")
def claim_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("claim_world")
    return build_toy_world(root, name="claim", train_families=100, test_families=40, seed=0)


def _synthetic_for(reduced, ratio, seed, out_dir):
    pool = select_source_images(reduced, len(reduced.images), seed)
    n = int(round(ratio * len(reduced.triplets)))
    return synthesize_triplets(pool, n, SynthesisBackends.toy(), SynthesisConfig(workers=2),
                               seed=seed, out_dir=out_dir).manifest


def test_full_runs_are_byte_identical(tmp_path):
    config = tmp_path / "mini.toml"
    config.write_text(SMALL_CONFIG, encoding="utf-8")
    first = tmp_path / "a" / "bundle"
    second = tmp_path / "b" / "bundle"
    run_experiment(config, seed=1, out=str(first))
    run_experiment(config, seed=1, out=str(second))
    for name in ("manifests/original.json", "manifests/reduced.json", "manifests/synthetic.json",
                 "source_images.json", "results.csv", "ablation.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_edit_locality_over_a_thousand_triplets(small_world, tmp_path):
    pool = split_manifest(small_world, Split.TRAIN)
    out = tmp_path / "syn"
    result = synthesize_triplets(pool, 1000, SynthesisBackends.toy(), SynthesisConfig(workers=4),
                                 seed=0, out_dir=out)
    manifest = result.manifest
    assert len(manifest.triplets) == 1000
    index = manifest.image_index()
    violations = 0
    for triplet in manifest.triplets:
        if validate_edit(triplet.edit):
            violations += 1
            continue
        scene = read_sidecar(out / index[triplet.reference_image_id].sidecar)
        before = render_scene(scene)
        after = load_png(out / index[triplet.target_image_id].uri)
        outside = ~component_region(triplet.edit.kind, before.shape[0], scene)
        if not np.array_equal(before[outside], after[outside]):
            violations += 1
    assert violations == 0


def test_synthetic_triplets_improve_recall(claim_world, tmp_path):
    originals = split_manifest(claim_world, Split.TRAIN)
    train_fn = make_train_fn(TRAIN)
    deltas = []
    for seed in range(5):
        reduced = subsample_images(originals, 0.3, seed)
        synthetic = _synthetic_for(reduced, 5.0, seed, tmp_path / f"syn-{seed}")
        base = evaluate(train_fn(reduced, seed), claim_world, Split.TEST, EVAL)
        augmented = evaluate(train_fn(merge(reduced, synthetic), seed), claim_world, Split.TEST, EVAL)
        deltas.append(augmented.recall_at[10] - base.recall_at[10])
    assert statistics.median(deltas) > 0, deltas
    assert min(deltas) >= -1.0, deltas


def test_ablation_synthetic_arm_dominates(claim_world, tmp_path):
    originals = split_manifest(claim_world, Split.TRAIN)
    fractions = [0.1, 0.3, 0.6, 1.0]
    recalls = {(f, arm): [] for f in fractions for arm in (ARM_ORIGINAL, ARM_SYNTHETIC)}
    for seed in range(3):
        reduced = subsample_images(originals, 0.3, seed)
        synthetic = _synthetic_for(reduced, 5.0, seed, tmp_path / f"syn-{seed}")
        table = run_ablation(claim_world, fractions, synthetic, make_train_fn(TRAIN), EVAL, seed=seed)
        assert table.prefix_nested
        assert table.to_csv().splitlines()[0] == "fraction,arm,k,recall"
        assert len(table.rows) == len(fractions) * 2 * len(EVAL.ks)
        for fraction in fractions:
            for arm in (ARM_ORIGINAL, ARM_SYNTHETIC):
                recalls[(fraction, arm)].append(table.recall(fraction, arm, 10))
    for fraction in fractions:
        assert (statistics.median(recalls[(fraction, ARM_SYNTHETIC)])
                >= statistics.median(recalls[(fraction, ARM_ORIGINAL)])), fraction
