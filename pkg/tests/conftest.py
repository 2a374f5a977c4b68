"""Fixtures compartidas: mundos de juguete y servicios HTTP simulados."""

import json
import sys
from pathlib import Path

import pytest
import requests

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import backend_client  # noqa: E402
from toy_world import build_toy_world  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """20 familias de entrenamiento y 8 de test, 3 variantes cada una."""
    root = tmp_path_factory.mktemp("small_world")
    return build_toy_world(root, name="toy", train_families=20, test_families=8,
                           variants_per_family=3, seed=0)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=None):
        self.status_code = status_code
        self._payload = payload
        self.text = text if text is not None else json.dumps(payload)

    def json(self):
        if self._payload is None:
            raise ValueError("no JSON")
        return self._payload


class StubService:
    """
    Sustituye requests.Session.post. `handlers` mapea la ruta final
    (caption, perturb, invert, edit) a una función body -> FakeResponse
    o a una excepción a lanzar.
    """

    def __init__(self, handlers):
        self.handlers = dict(handlers)
        self.calls = []

    def __call__(self, url, json=None, timeout=None):
        route = url.rstrip("/").rsplit("/", 1)[-1]
        self.calls.append((route, json))
        handler = self.handlers[route]
        if isinstance(handler, Exception):
            raise handler
        return handler(json)


@pytest.fixture
def stub_http(monkeypatch):
    """Instala un servicio simulado y anula las esperas del backoff."""
    monkeypatch.setattr(backend_client.time, "sleep", lambda seconds: None)

    def install(handlers):
        service = StubService(handlers)
        monkeypatch.setattr(requests.Session, "post", service)
        return service

    return install


@pytest.fixture
def unreachable():
    return requests.ConnectionError("conexión rechazada")


SMALL_CONFIG = """
[experiment]
name = "mini"
seed = 0
out = "runs/mini"
workers = 2

[backends]
captioner = "toy"
perturber = "rule_based"
generator = "toy"

[dataset]
kind = "toy"
train_families = 20
test_families = 6
fraction = 0.6
source_images = 30
synthetic_ratio = 1.0

[train]
epochs = 3
batch_size = 16
dim = 16

[eval]
split = "test"
top_n = 3

[ablation]
enabled = true
fractions = [0.6, 1.0]
"""


@pytest.fixture
def small_config(tmp_path):
    """Configuración de experimento reducida (pasar siempre out explícito)."""
    path = tmp_path / "mini.toml"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path
