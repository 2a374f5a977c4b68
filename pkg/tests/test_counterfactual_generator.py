import base64
import io

import numpy as np
import pytest
from PIL import Image

from caption_perturber import PerturberBackend, apply_replacement, perturb_caption
from captioner import CaptionerBackend, generate_caption
from conftest import FakeResponse
from counterfactual_generator import (
    EDIT_MODE_REFINE, EDIT_MODE_REPLACE, GenerationConfig, GenerationSkip, GeneratorBackend,
    SyntheticMediaWriter, edit_image, edit_mode_for, generate_target, invert_image,
)
from forge_errors import (
    BackendUnavailableError, ConfigError, EditValidationError, GenerationError, InversionQualityError,
)
from toy_world import SceneMeta, component_region, load_png, materialize_scene, read_sidecar, render_scene, save_png
from triplet_core import Caption, ComponentKind, ImageRecord, Provenance, Source, Split

SCENE = SceneMeta(subject="dog", adjective="white", background="grid", domain="photo", object="ball")


@pytest.fixture
def reference(tmp_path):
    record = materialize_scene(SCENE, tmp_path, "ref-1", Split.TRAIN)
    caption = generate_caption(record, CaptionerBackend.toy(), tmp_path)
    return tmp_path, record, caption


def _png_data_uri(array):
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode("ascii")


def test_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(num_inversion_steps=0).validate()
    with pytest.raises(ConfigError):
        GenerationConfig(cross_attention_injection_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        GenerationConfig(self_attention_injection_fraction=-0.1).validate()
    assert GenerationConfig().validate().num_inversion_steps == 50


def test_backend_requires_endpoint_iff_external():
    with pytest.raises(ConfigError):
        GeneratorBackend.external("")
    with pytest.raises(ConfigError):
        GeneratorBackend(kind=GeneratorBackend.toy().kind, endpoint="http://x")


def test_toy_inversion_is_exact(reference):
    root, record, caption = reference
    trajectory = invert_image(record, caption, GenerationConfig(), GeneratorBackend.toy(), root)
    assert trajectory.reconstruction_error == 0.0
    assert trajectory.handle == SCENE


def test_toy_inversion_beyond_tolerance(reference):
    root, record, caption = reference
    pixels = load_png(root / record.uri)
    pixels[:, :] = 0
    save_png(pixels, root / record.uri)
    with pytest.raises(InversionQualityError) as excinfo:
        invert_image(record, caption, GenerationConfig(), GeneratorBackend.toy(), root)
    assert excinfo.value.reconstruction_error > 0.05


def test_unreadable_reference(tmp_path):
    record = ImageRecord("gone", "images/gone.png", Split.TRAIN, sidecar="images/gone.scene.json")
    with pytest.raises(FileNotFoundError):
        invert_image(record, Caption("gone", "a dog"), GenerationConfig(), GeneratorBackend.toy(), tmp_path)


@pytest.mark.parametrize("kind", list(ComponentKind))
def test_toy_edit_is_local(reference, kind):
    root, record, caption = reference
    backend = GeneratorBackend.toy()
    edit = perturb_caption(caption, kind, 3, PerturberBackend.rule_based())
    writer = SyntheticMediaWriter(root / "out")
    trajectory = invert_image(record, caption, GenerationConfig(), backend, root)
    raster, synthetic = edit_image(trajectory, edit, GenerationConfig(), backend, writer, image_id="syn-1")

    before = render_scene(SCENE)
    outside = ~component_region(kind, before.shape[0], SCENE)
    assert np.array_equal(before[outside], raster[outside])
    assert not np.array_equal(before, raster)
    assert synthetic.source == Source.SYNTHETIC
    assert read_sidecar(root / "out" / synthetic.sidecar).value(kind) == edit.new_value


def test_edit_rejects_invalid_edit(reference):
    root, record, caption = reference
    backend = GeneratorBackend.toy()
    edit = apply_replacement(caption, ComponentKind.ADJECTIVE, "red", modification_text="something else")
    trajectory = invert_image(record, caption, GenerationConfig(), backend, root)
    with pytest.raises(EditValidationError):
        edit_image(trajectory, edit, GenerationConfig(), backend, SyntheticMediaWriter(root / "out"))


def test_edit_mode_selection(reference):
    _, _, caption = reference
    swap = apply_replacement(caption, ComponentKind.SUBJECT, "cat")
    longer = apply_replacement(caption, ComponentKind.SUBJECT, "sports car")
    assert edit_mode_for(swap) == EDIT_MODE_REPLACE
    assert edit_mode_for(longer) == EDIT_MODE_REFINE


def test_generate_target_builds_synthetic_triplet(reference):
    root, record, caption = reference
    edit = apply_replacement(caption, ComponentKind.BACKGROUND, "beach")
    writer = SyntheticMediaWriter(root / "out", prefix="run")
    image, triplet = generate_target(record, edit, GenerationConfig(seed=9), GeneratorBackend.toy(), writer,
                                     root=root, image_id=writer.image_id_for(4), triplet_id="run-syn-000004")
    assert image.image_id == "run-syn-000004"
    assert triplet.triplet_id == "run-syn-000004"
    assert triplet.provenance == Provenance.SYNTHETIC
    assert triplet.modification_text == "replace the grid with beach"
    assert triplet.generation_seed == 9
    assert triplet.edit_mode == EDIT_MODE_REPLACE
    assert triplet.category == "background"


def test_generate_target_skips_on_poor_inversion(reference):
    root, record, caption = reference
    save_png(np.zeros((64, 64, 3), dtype=np.uint8), root / record.uri)
    edit = apply_replacement(caption, ComponentKind.BACKGROUND, "beach")
    result = generate_target(record, edit, GenerationConfig(), GeneratorBackend.toy(),
                             SyntheticMediaWriter(root / "out"), root=root)
    assert isinstance(result, GenerationSkip)
    assert result.reason == "inversion_quality"


def test_writer_rejects_duplicate_paths(tmp_path):
    writer = SyntheticMediaWriter(tmp_path)
    raster = render_scene(SCENE)
    writer.write("dup", raster, Split.TRAIN)
    with pytest.raises(GenerationError):
        writer.write("dup", raster, Split.TRAIN)


def test_external_generation(reference, stub_http):
    root, record, caption = reference
    edited = render_scene(SCENE.with_value(ComponentKind.ADJECTIVE, "red"))
    service = stub_http({
        "invert": lambda body: FakeResponse(payload={"trajectory_id": "traj-1", "reconstruction_error": 0.01}),
        "edit": lambda body: FakeResponse(payload={"image": _png_data_uri(edited)}),
    })
    backend = GeneratorBackend.external("http://diffusion.test")
    edit = apply_replacement(caption, ComponentKind.ADJECTIVE, "red")
    image, triplet = generate_target(record, edit, GenerationConfig(), backend,
                                     SyntheticMediaWriter(root / "out"), root=root)
    assert np.array_equal(load_png(root / "out" / image.uri), edited)
    edit_body = service.calls[1][1]
    assert edit_body["trajectory_id"] == "traj-1"
    assert edit_body["controller"] == EDIT_MODE_REPLACE
    assert edit_body["blend_words"] == ["white", "red"]
    assert edit_body["cross_frac"] == 0.8
    assert triplet.target_image_id == image.image_id


def test_external_edit_error_carries_context(reference, stub_http):
    root, record, caption = reference
    stub_http({
        "invert": lambda body: FakeResponse(payload={"trajectory_id": "traj-1", "reconstruction_error": 0.0}),
        "edit": lambda body: FakeResponse(status_code=422, text="bad prompt"),
    })
    edit = apply_replacement(caption, ComponentKind.ADJECTIVE, "red")
    with pytest.raises(GenerationError) as excinfo:
        generate_target(record, edit, GenerationConfig(), GeneratorBackend.external("http://diffusion-422.test"),
                        SyntheticMediaWriter(root / "out"), root=root)
    assert excinfo.value.edit_context["new"] == "red"


def test_external_outage_propagates(reference, stub_http, unreachable):
    root, record, caption = reference
    stub_http({"invert": unreachable})
    edit = apply_replacement(caption, ComponentKind.ADJECTIVE, "red")
    with pytest.raises(BackendUnavailableError):
        generate_target(record, edit, GenerationConfig(), GeneratorBackend.external("http://diffusion-down.test"),
                        SyntheticMediaWriter(root / "out"), root=root)
