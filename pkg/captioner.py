#!/usr/bin/env python3
"""
Captioner - Caption de referencia de cada imagen
========================================================
Backends intercambiables:
- external_service: servicio visión-lenguaje vía POST {endpoint}/caption
- toy: plantilla determinista aplicada a los metadatos sidecar de la escena

Versión: 1.0.0
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Optional

from backend_client import ServiceClient, encode_image_base64, require_fields
from forge_errors import BackendError, ConfigError
from forge_limits import LIMITS
from toy_world import DEFAULT_TEMPLATE, read_sidecar, render_template
from triplet_core import Caption, DatasetManifest, ImageRecord

logger = logging.getLogger(__name__)


class CaptionerKind(str, Enum):
    EXTERNAL_SERVICE = "external_service"
    TOY = "toy"


@dataclass(frozen=True)
class CaptionerBackend:
    """Configuración del backend de captioning."""
    kind: CaptionerKind
    endpoint: Optional[str] = None
    template: Optional[str] = None
    timeout: float = LIMITS.REQUEST_TIMEOUT_SECONDS
    max_retries: int = LIMITS.MAX_RETRIES
    max_in_flight: int = LIMITS.MAX_IN_FLIGHT_REQUESTS

    def __post_init__(self):
        if self.kind == CaptionerKind.TOY:
            if not self.template or self.endpoint:
                raise ConfigError("El captioner toy requiere template y no admite endpoint")
        elif not self.endpoint or self.template:
            raise ConfigError("El captioner externo requiere endpoint y no admite template")

    @classmethod
    def toy(cls, template: str = DEFAULT_TEMPLATE) -> "CaptionerBackend":
        return cls(kind=CaptionerKind.TOY, template=template)

    @classmethod
    def external(cls, endpoint: str, **kwargs) -> "CaptionerBackend":
        return cls(kind=CaptionerKind.EXTERNAL_SERVICE, endpoint=endpoint, **kwargs)


@lru_cache(maxsize=None)
def _client_for(backend: CaptionerBackend) -> ServiceClient:
    # Un cliente por backend: el semáforo limita las peticiones en vuelo
    return ServiceClient(backend.endpoint, timeout=backend.timeout,
                         max_retries=backend.max_retries, max_in_flight=backend.max_in_flight)


def generate_caption(image: ImageRecord, backend: CaptionerBackend, root=".") -> Caption:
    """
    Genera el caption de referencia de una imagen.

    El backend toy rellena los tramos de los cinco componentes; el externo
    deja components sin definir (los interpreta el perturbador).

    Raises:
        FileNotFoundError: imagen ilegible o sidecar ausente (toy)
        BackendError: respuesta no-200 o cuerpo malformado del servicio
    """
    root = Path(root)
    image_path = root / image.uri
    if not image_path.is_file():
        raise FileNotFoundError(f"Imagen ilegible: {image_path}")

    if backend.kind == CaptionerKind.TOY:
        if not image.sidecar:
            raise FileNotFoundError(f"La imagen {image.image_id} no tiene sidecar de escena")
        scene = read_sidecar(root / image.sidecar)
        text, components = render_template(backend.template, scene)
        return Caption(image_id=image.image_id, text=text, components=components)

    body = {
        "image": encode_image_base64(image_path),
        "format": image_path.suffix.lstrip(".").lower() or "png",
    }
    payload = require_fields(_client_for(backend).post_json("caption", body), ["caption"], "caption")
    text = payload["caption"]
    if not isinstance(text, str) or not text.strip():
        raise BackendError(f"Caption vacío para {image.image_id}", raw=payload)
    return Caption(image_id=image.image_id, text=text.strip())


def caption_images(manifest: DatasetManifest, backend: CaptionerBackend,
                   image_ids=None, workers: int = LIMITS.DEFAULT_WORKERS,
                   progress_callback: Optional[Callable[[int, int], None]] = None,
                   on_caption: Optional[Callable[[Caption], None]] = None) -> Dict[str, Caption]:
    """
    Captions de varias imágenes en paralelo (el backend no guarda estado).

    on_caption se invoca con cada caption en cuanto termina (persistencia
    incremental); un fallo interrumpe el lote y se propaga.
    """
    index = manifest.image_index()
    ids = list(image_ids) if image_ids is not None else list(index)
    results: Dict[str, Caption] = {}

    with ThreadPoolExecutor(max_workers=LIMITS.clamp_workers(workers)) as executor:
        futures = {
            executor.submit(generate_caption, index[image_id], backend, manifest.root): image_id
            for image_id in ids
        }
        for completed, future in enumerate(as_completed(futures), start=1):
            caption = future.result()
            results[futures[future]] = caption
            if on_caption:
                on_caption(caption)
            if progress_callback:
                progress_callback(completed, len(ids))

    logger.info(f"Captions generados: {len(results)} ({backend.kind.value})")
    return {image_id: results[image_id] for image_id in ids}
