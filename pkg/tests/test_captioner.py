import pytest

from captioner import CaptionerBackend, caption_images, generate_caption
from conftest import FakeResponse
from forge_errors import BackendError, BackendUnavailableError, ConfigError
from toy_world import SceneMeta, materialize_scene
from triplet_core import ComponentKind, DatasetManifest, ImageRecord, Split


@pytest.fixture
def scene_image(tmp_path):
    scene = SceneMeta(subject="dog", adjective="white", background="grid", domain="photo", object="ball")
    record = materialize_scene(scene, tmp_path, "img-1", Split.TRAIN)
    return tmp_path, record


def test_toy_caption_fills_all_component_spans(scene_image):
    root, record = scene_image
    caption = generate_caption(record, CaptionerBackend.toy(), root)
    assert caption.text == "a photo of a white dog with a ball on a grid background"
    assert set(caption.components) == set(ComponentKind)
    assert caption.value_of(ComponentKind.OBJECT) == "ball"


def test_toy_caption_with_custom_template(scene_image):
    root, record = scene_image
    backend = CaptionerBackend.toy("a {adjective} {subject} in a {domain}")
    caption = generate_caption(record, backend, root)
    assert caption.text == "a white dog in a photo"
    assert ComponentKind.BACKGROUND not in caption.components


def test_unreadable_image(tmp_path):
    record = ImageRecord("missing", "images/missing.png", Split.TRAIN)
    with pytest.raises(FileNotFoundError):
        generate_caption(record, CaptionerBackend.toy(), tmp_path)


def test_backend_configuration_is_checked():
    with pytest.raises(ConfigError):
        CaptionerBackend.external("")
    with pytest.raises(ConfigError):
        CaptionerBackend(kind=CaptionerBackend.toy().kind, template="x {subject}", endpoint="http://x")


def test_external_caption_leaves_components_unset(scene_image, stub_http):
    root, record = scene_image
    service = stub_http({"caption": lambda body: FakeResponse(payload={"caption": " a dog on a sofa "})})
    caption = generate_caption(record, CaptionerBackend.external("http://captioner.test"), root)
    assert caption.text == "a dog on a sofa"
    assert caption.components is None
    route, body = service.calls[0]
    assert route == "caption"
    assert body["format"] == "png"


def test_external_non_200_raises_backend_error_with_raw(scene_image, stub_http):
    root, record = scene_image
    stub_http({"caption": lambda body: FakeResponse(status_code=400, text="bad image")})
    with pytest.raises(BackendError) as excinfo:
        generate_caption(record, CaptionerBackend.external("http://captioner-400.test"), root)
    assert excinfo.value.raw == "bad image"
    assert excinfo.value.status_code == 400


def test_external_malformed_body(scene_image, stub_http):
    root, record = scene_image
    stub_http({"caption": lambda body: FakeResponse(payload={"text": "no caption key"})})
    with pytest.raises(BackendError):
        generate_caption(record, CaptionerBackend.external("http://captioner-bad.test"), root)


def test_external_outage_after_retries(scene_image, stub_http, unreachable):
    root, record = scene_image
    service = stub_http({"caption": unreachable})
    backend = CaptionerBackend.external("http://captioner-down.test", max_retries=3)
    with pytest.raises(BackendUnavailableError):
        generate_caption(record, backend, root)
    assert len(service.calls) == 3


def test_caption_images_preserves_order_and_reports(small_world):
    ids = [img.image_id for img in small_world.images[:6]]
    seen, progress = [], []
    captions = caption_images(small_world, CaptionerBackend.toy(), ids, workers=3,
                              progress_callback=lambda done, total: progress.append((done, total)),
                              on_caption=seen.append)
    assert list(captions) == ids
    assert sorted(c.image_id for c in seen) == sorted(ids)
    assert progress[-1] == (6, 6)


def test_caption_images_empty_manifest():
    assert caption_images(DatasetManifest("empty"), CaptionerBackend.toy()) == {}
