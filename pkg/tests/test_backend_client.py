import base64

import pytest

from backend_client import (
    ServiceClient, decode_image_payload, encode_image_base64, endpoint_from_env, require_fields,
)
from conftest import FakeResponse
from forge_errors import BackendError, BackendUnavailableError

PNG_BYTES = b"\x89PNG\r\n\x1a\nfake"


def test_decode_plain_and_data_uri():
    encoded = base64.b64encode(PNG_BYTES).decode("ascii")
    assert decode_image_payload(encoded) == PNG_BYTES
    assert decode_image_payload(f"data:image/png;base64,{encoded}") == PNG_BYTES


def test_decode_rejects_garbage():
    with pytest.raises(BackendError):
        decode_image_payload("esto no es base64 ***")


def test_encode_image(tmp_path):
    path = tmp_path / "img.png"
    path.write_bytes(PNG_BYTES)
    assert base64.b64decode(encode_image_base64(path)) == PNG_BYTES
    with pytest.raises(FileNotFoundError):
        encode_image_base64(tmp_path / "missing.png")


def test_require_fields():
    assert require_fields({"caption": "x", "components": []}, ["caption"], "caption")["caption"] == "x"
    with pytest.raises(BackendError) as excinfo:
        require_fields({"caption": "x"}, ["caption", "components"], "caption")
    assert excinfo.value.raw == {"caption": "x"}
    with pytest.raises(BackendError):
        require_fields(["caption"], ["caption"], "caption")


def test_endpoint_from_env(monkeypatch):
    monkeypatch.setenv("FORGE_GENERATOR_ENDPOINT", "http://gen.local")
    assert endpoint_from_env("generator") == "http://gen.local"
    monkeypatch.setenv("FORGE_GENERATOR_ENDPOINT", "")
    assert endpoint_from_env("generator") is None


def test_client_requires_endpoint():
    with pytest.raises(ValueError):
        ServiceClient("")


def test_post_json_success(stub_http):
    service = stub_http({"caption": lambda body: FakeResponse(payload={"caption": body["image_id"]})})
    client = ServiceClient("http://svc.test/")
    assert client.post_json("/caption", {"image_id": "a"}) == {"caption": "a"}
    assert service.calls == [("caption", {"image_id": "a"})]


def test_transient_errors_are_retried(stub_http):
    responses = iter([FakeResponse(503, text="ocupado"), FakeResponse(429, text="lento"),
                      FakeResponse(payload={"ok": True})])
    service = stub_http({"edit": lambda body: next(responses)})
    assert ServiceClient("http://svc.test", max_retries=3).post_json("edit", {}) == {"ok": True}
    assert len(service.calls) == 3


def test_client_error_is_not_retried(stub_http):
    service = stub_http({"perturb": lambda body: FakeResponse(422, text='{"detail": "span"}')})
    with pytest.raises(BackendError) as excinfo:
        ServiceClient("http://svc.test", max_retries=4).post_json("perturb", {})
    assert excinfo.value.status_code == 422
    assert excinfo.value.raw == '{"detail": "span"}'
    assert len(service.calls) == 1


def test_non_json_body(stub_http):
    stub_http({"invert": lambda body: FakeResponse(200, payload=None, text="<html>")})
    with pytest.raises(BackendError) as excinfo:
        ServiceClient("http://svc.test").post_json("invert", {})
    assert excinfo.value.raw == "<html>"


def test_unreachable_exhausts_retries(stub_http, unreachable):
    service = stub_http({"caption": unreachable})
    with pytest.raises(BackendUnavailableError):
        ServiceClient("http://svc.test", max_retries=3).post_json("caption", {})
    assert len(service.calls) == 3


def test_persistent_5xx_becomes_unavailable(stub_http):
    stub_http({"edit": lambda body: FakeResponse(500, text="boom")})
    with pytest.raises(BackendUnavailableError):
        ServiceClient("http://svc.test", max_retries=2).post_json("edit", {})
