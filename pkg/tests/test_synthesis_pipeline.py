import threading

import numpy as np
import pytest

import synthesis_pipeline
from caption_perturber import validate_edit
from captioner import CaptionerBackend
from counterfactual_generator import GenerationSkip
from forge_errors import BackendUnavailableError, SynthesisAborted
from synthesis_pipeline import (
    SYNTHETIC_MANIFEST_FILE, SynthesisBackends, SynthesisConfig, derive_item_seed, select_source_images,
    synthesize_triplets,
)
from toy_world import SceneMeta, component_region, load_png, materialize_scene, read_sidecar, render_scene
from triplet_core import DatasetManifest, Provenance, Source, Split, load_manifest, split_manifest, validate_manifest


@pytest.fixture
def pool(small_world):
    return select_source_images(split_manifest(small_world, Split.TRAIN), 20, seed=0)


def _single_scene_pool(root, scene):
    record = materialize_scene(scene, root, "only", Split.TRAIN)
    return DatasetManifest("single", str(root), (record,))


def test_item_seeds_are_stable_and_bounded():
    assert derive_item_seed(0, "img-1", 0) == derive_item_seed(0, "img-1", 0)
    assert derive_item_seed(0, "img-1", 0) != derive_item_seed(0, "img-1", 1)
    assert derive_item_seed(0, "img-1", 0) != derive_item_seed(1, "img-1", 0)
    assert 0 <= derive_item_seed(7, "x", 3) < 2 ** 31


def test_select_source_images(small_world):
    train = split_manifest(small_world, Split.TRAIN)
    chosen = select_source_images(train, 15, seed=3)
    assert len(chosen.images) == 15
    assert chosen.triplets == ()
    assert chosen.images == select_source_images(train, 15, seed=3).images
    assert len(select_source_images(train, 10_000, seed=3).images) == len(train.images)


def test_zero_triplets_requested(pool, tmp_path):
    result = synthesize_triplets(pool, 0, SynthesisBackends.toy(), out_dir=tmp_path / "syn")
    assert result.complete
    assert result.manifest.images == ()
    assert result.manifest.triplets == ()


def test_negative_request_and_empty_pool(pool, tmp_path):
    with pytest.raises(ValueError):
        synthesize_triplets(pool, -1, SynthesisBackends.toy(), out_dir=tmp_path / "a")
    with pytest.raises(ValueError):
        synthesize_triplets(DatasetManifest("empty"), 3, SynthesisBackends.toy(), out_dir=tmp_path / "b")


def test_synthesis_produces_valid_local_triplets(pool, tmp_path):
    out = tmp_path / "syn"
    progress = []
    result = synthesize_triplets(pool, 30, SynthesisBackends.toy(), SynthesisConfig(workers=3), seed=1,
                                 out_dir=out, progress_callback=lambda done, total: progress.append((done, total)))
    manifest = result.manifest
    assert result.complete
    assert len(manifest.triplets) == 30
    assert progress[-1] == (30, 30)
    assert validate_manifest(manifest) == []
    assert all(t.provenance == Provenance.SYNTHETIC for t in manifest.triplets)
    assert len({t.triplet_id for t in manifest.triplets}) == 30
    assert len(list((out / "synthetic").glob("*.png"))) == 30

    index = manifest.image_index()
    reused = {t.reference_image_id for t in manifest.triplets}
    assert len(reused) == 20
    for triplet in manifest.triplets:
        assert validate_edit(triplet.edit) == []
        reference = index[triplet.reference_image_id]
        target = index[triplet.target_image_id]
        assert reference.source == Source.ORIGINAL
        assert target.source == Source.SYNTHETIC
        scene = read_sidecar(out / reference.sidecar)
        before = render_scene(scene)
        after = load_png(out / target.uri)
        outside = ~component_region(triplet.edit.kind, before.shape[0], scene)
        assert np.array_equal(before[outside], after[outside])

    reloaded = load_manifest(out / SYNTHETIC_MANIFEST_FILE)
    assert reloaded.triplets == manifest.triplets


def test_synthesis_is_reproducible(pool, tmp_path):
    synthesize_triplets(pool, 12, SynthesisBackends.toy(), SynthesisConfig(workers=1), seed=5, out_dir=tmp_path / "a")
    synthesize_triplets(pool, 12, SynthesisBackends.toy(), SynthesisConfig(workers=4), seed=5, out_dir=tmp_path / "b")
    first = (tmp_path / "a" / SYNTHETIC_MANIFEST_FILE).read_bytes()
    second = (tmp_path / "b" / SYNTHETIC_MANIFEST_FILE).read_bytes()
    assert first == second


@pytest.mark.parametrize("object_value,edit_space", [("ball", 25), (None, 22)])
def test_single_scene_shortfall_matches_edit_space(tmp_path, object_value, edit_space):
    scene = SceneMeta(subject="dog", adjective="white", background="grid", domain="photo", object=object_value)
    pool = _single_scene_pool(tmp_path / "pool", scene)
    result = synthesize_triplets(pool, 40, SynthesisBackends.toy(), seed=2, out_dir=tmp_path / "syn")
    assert not result.complete
    assert result.shortfall.achieved == edit_space
    assert result.shortfall.to_dict()["missing"] == 40 - edit_space
    assert result.shortfall.exhausted_references == 1
    edits = {(t.edit.kind, t.edit.new_value) for t in result.manifest.triplets}
    assert len(edits) == edit_space


def test_retry_budget_retires_failing_references(pool, tmp_path, monkeypatch):
    monkeypatch.setattr(synthesis_pipeline, "generate_target",
                        lambda image, *args, **kwargs: GenerationSkip(image.image_id, "inversion_quality", 0.3))
    two = pool.with_contents(images=pool.images[:2])
    result = synthesize_triplets(two, 5, SynthesisBackends.toy(), SynthesisConfig(retry_budget=3),
                                 out_dir=tmp_path / "syn")
    assert result.shortfall.achieved == 0
    assert result.shortfall.exhausted_references == 2
    assert result.shortfall.failures["inversion_quality"] >= 6


def test_outage_checkpoints_and_resume_has_no_duplicates(pool, tmp_path, monkeypatch):
    out = tmp_path / "run" / "syn"
    real_generate = synthesis_pipeline.generate_target
    lock = threading.Lock()
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        with lock:
            calls["n"] += 1
            failing = calls["n"] > 8
        if failing:
            raise BackendUnavailableError("generador caído")
        return real_generate(*args, **kwargs)

    monkeypatch.setattr(synthesis_pipeline, "generate_target", flaky)
    with pytest.raises(SynthesisAborted) as excinfo:
        synthesize_triplets(pool, 25, SynthesisBackends.toy(), SynthesisConfig(workers=2), seed=9, out_dir=out)
    assert excinfo.value.completed == 8
    assert (out / "checkpoint" / "progress.jsonl").exists()

    monkeypatch.setattr(synthesis_pipeline, "generate_target", real_generate)
    resumed = synthesize_triplets(pool, 25, SynthesisBackends.toy(), SynthesisConfig(workers=2), seed=9, out_dir=out)
    ids = [t.triplet_id for t in resumed.manifest.triplets]
    assert len(ids) == len(set(ids)) == 25
    assert len(list((out / "synthetic").glob("*.png"))) == 25

    fresh_out = tmp_path / "fresh" / "syn"
    synthesize_triplets(pool, 25, SynthesisBackends.toy(), SynthesisConfig(workers=2), seed=9, out_dir=fresh_out)
    assert (out / SYNTHETIC_MANIFEST_FILE).read_bytes() == (fresh_out / SYNTHETIC_MANIFEST_FILE).read_bytes()


def test_captioner_outage_aborts(pool, tmp_path, stub_http, unreachable):
    stub_http({"caption": unreachable})
    backends = SynthesisBackends(
        captioner=CaptionerBackend.external("http://captioner-synth.test", max_retries=1),
        perturber=SynthesisBackends.toy().perturber,
        generator=SynthesisBackends.toy().generator,
    )
    with pytest.raises(SynthesisAborted):
        synthesize_triplets(pool, 3, backends, out_dir=tmp_path / "syn")
