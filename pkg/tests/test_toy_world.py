import numpy as np
import pytest

from toy_world import (
    DEFAULT_TEMPLATE, SceneMeta, build_toy_world, component_region, default_vocabulary, load_png,
    materialize_scene, read_sidecar, render_scene, render_template,
)
from triplet_core import ComponentKind, Provenance, Split, span_text, tokenize, validate_manifest

SCENE = SceneMeta(subject="sports car", adjective="white", background="mountains", domain="photo")


def test_default_template_spans_match_values():
    text, spans = render_template(DEFAULT_TEMPLATE, SCENE)
    assert text == "a photo of a white sports car on a mountains background"
    tokens = tokenize(text)
    assert span_text(tokens, spans[ComponentKind.SUBJECT]) == "sports car"
    assert span_text(tokens, spans[ComponentKind.BACKGROUND]) == "mountains"
    assert ComponentKind.OBJECT not in spans


def test_optional_object_segment():
    text, spans = render_template(DEFAULT_TEMPLATE, SCENE.with_value(ComponentKind.OBJECT, "ball"))
    assert text == "a photo of a white sports car with a ball on a mountains background"
    assert span_text(tokenize(text), spans[ComponentKind.OBJECT]) == "ball"


def test_road_template_sentence():
    template = "a {domain} of a {adjective} {subject} driving down a road with {background} in the background"
    text, _ = render_template(template, SCENE)
    assert text == "a photo of a white sports car driving down a road with mountains in the background"


def test_template_requiring_missing_component_fails():
    with pytest.raises(ValueError):
        render_template("a {object} alone", SCENE)


def test_render_is_deterministic():
    assert np.array_equal(render_scene(SCENE), render_scene(SCENE))


@pytest.mark.parametrize("kind,value", [
    (ComponentKind.ADJECTIVE, "red"),
    (ComponentKind.SUBJECT, "cat"),
    (ComponentKind.BACKGROUND, "beach"),
    (ComponentKind.DOMAIN, "painting"),
    (ComponentKind.OBJECT, "hat"),
])
def test_single_component_edit_stays_inside_its_region(kind, value):
    scene = SCENE.with_value(ComponentKind.OBJECT, "ball")
    before = render_scene(scene)
    after = render_scene(scene.with_value(kind, value))
    outside = ~component_region(kind, before.shape[0], scene)
    assert np.array_equal(before[outside], after[outside])
    assert not np.array_equal(before, after)


def test_background_edit_without_object_covers_object_corner():
    before = render_scene(SCENE)
    after = render_scene(SCENE.with_value(ComponentKind.BACKGROUND, "forest"))
    outside = ~component_region(ComponentKind.BACKGROUND, before.shape[0], SCENE)
    assert np.array_equal(before[outside], after[outside])


def test_out_of_vocabulary_scene_is_rejected():
    with pytest.raises(ValueError):
        render_scene(SCENE.with_value(ComponentKind.SUBJECT, "unicorn"))


def test_materialize_writes_png_and_sidecar(tmp_path):
    record = materialize_scene(SCENE, tmp_path, "img-1", Split.TRAIN)
    assert read_sidecar(tmp_path / record.sidecar) == SCENE
    assert np.array_equal(load_png(tmp_path / record.uri), render_scene(SCENE))


def test_vocabulary_edit_space_sizes():
    vocab = default_vocabulary()
    with_object = sum(len(vocab.values(k)) - 1 for k in ComponentKind)
    assert with_object == 25
    assert with_object - (len(vocab.values(ComponentKind.OBJECT)) - 1) == 22


def test_build_toy_world_shape(small_world):
    stats = small_world.stats
    assert stats.train_images == 20 * 4
    assert stats.test_images == 8 * 4
    assert stats.train_triplets == 20 * 3
    assert stats.test_triplets == 8 * 3
    assert validate_manifest(small_world) == []
    assert all(t.provenance == Provenance.MANUAL for t in small_world.triplets)
    assert all(t.category in {k.value for k in ComponentKind} for t in small_world.triplets)


def test_build_toy_world_is_seeded(tmp_path):
    a = build_toy_world(tmp_path / "a", train_families=3, test_families=1, seed=5)
    b = build_toy_world(tmp_path / "b", train_families=3, test_families=1, seed=5)
    assert a.images == b.images
    assert a.triplets == b.triplets
