#!/usr/bin/env python3
"""
Counterfactual Generator - Imagen objetivo desde la referencia y el par de captions
====================================================================
Contrato de orquestación de la generación contrafactual:
1. Inversión de la imagen de referencia (reconstrucción fiel, con tolerancia)
2. Edición guiada por el caption contrafactual con inyección de atención
   (word-swap 'replace' o 'refine' cuando cambia la longitud del tramo)

Backends:
- toy: inversión = re-render desde el sidecar; edición = render de la escena
  con el componente editado (localidad exacta por regiones)
- external_diffusion: POST {endpoint}/invert y {endpoint}/edit

Versión: 1.0.0
"""

import io
import logging
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from backend_client import ServiceClient, decode_image_payload, encode_image_base64, require_fields
from caption_perturber import validate_edit
from forge_errors import (
    BackendError, BackendUnavailableError, ConfigError, EditValidationError, GenerationError,
    InversionQualityError,
)
from forge_limits import LIMITS
from toy_world import (
    SceneMeta, ToyVocabulary, default_vocabulary, load_png, read_sidecar, render_scene, save_png,
    write_sidecar,
)
from triplet_core import Caption, CaptionEdit, ImageRecord, Provenance, Source, Split, Triplet

logger = logging.getLogger(__name__)

EDIT_MODE_REPLACE = "replace"
EDIT_MODE_REFINE = "refine"


# ==================== CONFIGURACIÓN ====================

@dataclass(frozen=True)
class GenerationConfig:
    """Parámetros de inversión/edición (valores por defecto en LIMITS)."""
    num_inversion_steps: int = LIMITS.NUM_INVERSION_STEPS
    guidance_scale: float = LIMITS.GUIDANCE_SCALE
    cross_attention_injection_fraction: float = LIMITS.CROSS_ATTENTION_FRACTION
    self_attention_injection_fraction: float = LIMITS.SELF_ATTENTION_FRACTION
    null_text_opt_iters: int = LIMITS.NULL_TEXT_OPT_ITERS
    seed: int = 0
    output_size: int = LIMITS.OUTPUT_SIZE
    inversion_tolerance: float = LIMITS.INVERSION_TOLERANCE

    def validate(self) -> "GenerationConfig":
        """
        Raises:
            ConfigError: si algún parámetro viola sus invariantes
        """
        check = LIMITS.check_generation(
            self.num_inversion_steps,
            self.cross_attention_injection_fraction,
            self.self_attention_injection_fraction,
        )
        problems = list(check.exceeded)
        if not self.guidance_scale > 0:
            problems.append(f"guidance_scale debe ser > 0 ({self.guidance_scale})")
        if self.null_text_opt_iters < 0:
            problems.append(f"null_text_opt_iters negativo ({self.null_text_opt_iters})")
        if self.output_size < 1:
            problems.append(f"output_size inválido ({self.output_size})")
        if not (self.inversion_tolerance >= 0 and math.isfinite(self.inversion_tolerance)):
            problems.append(f"inversion_tolerance inválida ({self.inversion_tolerance})")
        if problems:
            raise ConfigError("Configuración de generación inválida: " + "; ".join(problems))
        return self

    def with_seed(self, seed: int) -> "GenerationConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class GeneratorKind(str, Enum):
    EXTERNAL_DIFFUSION = "external_diffusion"
    TOY = "toy"


@dataclass(frozen=True)
class GeneratorBackend:
    kind: GeneratorKind
    endpoint: Optional[str] = None
    vocabulary: Optional[ToyVocabulary] = field(default=None, compare=False, hash=False)
    timeout: float = LIMITS.REQUEST_TIMEOUT_SECONDS
    max_retries: int = LIMITS.MAX_RETRIES
    max_in_flight: int = LIMITS.MAX_IN_FLIGHT_REQUESTS

    def __post_init__(self):
        if (self.kind == GeneratorKind.EXTERNAL_DIFFUSION) != bool(self.endpoint):
            raise ConfigError("El generador requiere endpoint si y solo si es external_diffusion")
        if self.kind == GeneratorKind.TOY and self.vocabulary is None:
            object.__setattr__(self, "vocabulary", default_vocabulary())

    @classmethod
    def toy(cls, vocabulary: Optional[ToyVocabulary] = None) -> "GeneratorBackend":
        return cls(kind=GeneratorKind.TOY, vocabulary=vocabulary)

    @classmethod
    def external(cls, endpoint: str, **kwargs) -> "GeneratorBackend":
        return cls(kind=GeneratorKind.EXTERNAL_DIFFUSION, endpoint=endpoint, **kwargs)


@dataclass(frozen=True)
class LatentTrajectory:
    """Handle opaco de la inversión + error de reconstrucción en [0, 1]."""
    handle: Union[str, SceneMeta]
    reconstruction_error: float
    image_id: str
    caption_text: str
    size: int


@dataclass(frozen=True)
class GenerationSkip:
    """Marcador de intento omitido (inversión fuera de tolerancia)."""
    image_id: str
    reason: str
    reconstruction_error: Optional[float] = None


@lru_cache(maxsize=None)
def _client_for(endpoint: str, timeout: float, max_retries: int, max_in_flight: int) -> ServiceClient:
    return ServiceClient(endpoint, timeout=timeout, max_retries=max_retries, max_in_flight=max_in_flight)


def _client(backend: GeneratorBackend) -> ServiceClient:
    return _client_for(backend.endpoint, backend.timeout, backend.max_retries, backend.max_in_flight)


def edit_mode_for(edit: CaptionEdit) -> str:
    """'replace' si el tramo conserva la longitud (word-swap), si no 'refine'."""
    ref_len = edit.changed_span_ref[1] - edit.changed_span_ref[0]
    cf_len = edit.changed_span_cf[1] - edit.changed_span_cf[0]
    return EDIT_MODE_REPLACE if ref_len == cf_len else EDIT_MODE_REFINE


def _edit_context(edit: CaptionEdit, **extra) -> Dict[str, Any]:
    context = {
        "image_id": edit.reference_caption.image_id,
        "kind": edit.kind.value,
        "old": edit.old_value,
        "new": edit.new_value,
        "source_caption": edit.reference_caption.text,
        "target_caption": edit.counterfactual_caption.text,
    }
    context.update(extra)
    return context


# ==================== ESCRITURA DE MEDIOS SINTÉTICOS ====================

class SyntheticMediaWriter:
    """
    Escritor de rasters sintéticos bajo {root}/{subdir}.

    Los ids salen de un contador sincronizado salvo que el llamador los
    asigne explícitamente (orden de plan determinista).
    """

    def __init__(self, root, prefix: str = "syn", subdir: str = "synthetic"):
        self.root = Path(root)
        self.prefix = prefix
        self.subdir = subdir
        self._lock = threading.Lock()
        self._counter = 0
        self._written = set()

    def image_id_for(self, slot: int) -> str:
        return f"{self.prefix}-syn-{slot:06d}"

    def next_id(self) -> str:
        with self._lock:
            image_id = self.image_id_for(self._counter)
            self._counter += 1
            return image_id

    def write(self, image_id: str, raster: np.ndarray, split: Split,
              scene: Optional[SceneMeta] = None) -> ImageRecord:
        uri = f"{self.subdir}/{image_id}.png"
        with self._lock:
            if uri in self._written:
                raise GenerationError(f"Ruta sintética ya escrita: {uri}", {"image_id": image_id})
            self._written.add(uri)
        save_png(raster, self.root / uri)
        sidecar = None
        if scene is not None:
            sidecar = f"{self.subdir}/{image_id}.scene.json"
            write_sidecar(self.root / sidecar, scene)
        return ImageRecord(image_id=image_id, uri=uri, split=split, source=Source.SYNTHETIC, sidecar=sidecar)


# ==================== INVERSIÓN ====================

def invert_image(image: ImageRecord, caption: Caption, config: GenerationConfig,
                 backend: GeneratorBackend, root=".") -> LatentTrajectory:
    """
    Invierte la imagen de referencia.

    Raises:
        ConfigError: configuración inválida
        FileNotFoundError: imagen ilegible
        GenerationError: fallo del backend
        InversionQualityError: error de reconstrucción por encima de la tolerancia
    """
    config.validate()
    root = Path(root)
    path = root / image.uri
    if not path.is_file():
        raise FileNotFoundError(f"Imagen ilegible: {path}")

    if backend.kind == GeneratorKind.TOY:
        if not image.sidecar:
            raise GenerationError(f"La imagen {image.image_id} no tiene sidecar de escena",
                                  {"image_id": image.image_id})
        scene = read_sidecar(root / image.sidecar)
        pixels = load_png(path)
        try:
            rendered = render_scene(scene, backend.vocabulary, size=pixels.shape[0])
        except ValueError as e:
            raise GenerationError(f"Escena inválida para {image.image_id}: {e}", {"image_id": image.image_id})
        error = float(np.abs(pixels.astype(np.int16) - rendered.astype(np.int16)).mean() / 255.0)
        handle: Union[str, SceneMeta] = scene
        size = pixels.shape[0]
    else:
        body = {
            "image": encode_image_base64(path),
            "caption": caption.text,
            "steps": config.num_inversion_steps,
            "guidance": config.guidance_scale,
            "null_opt_iters": config.null_text_opt_iters,
            "seed": config.seed,
        }
        try:
            payload = require_fields(_client(backend).post_json("invert", body),
                                     ["trajectory_id", "reconstruction_error"], "invert")
            error = float(payload["reconstruction_error"])
        except BackendUnavailableError:
            raise
        except (BackendError, TypeError, ValueError) as e:
            raise GenerationError(f"Inversión fallida para {image.image_id}: {e}",
                                  {"image_id": image.image_id}) from e
        if not math.isfinite(error) or error < 0:
            raise GenerationError(f"Error de reconstrucción inválido: {error}", {"image_id": image.image_id})
        handle = str(payload["trajectory_id"])
        size = config.output_size

    if error > config.inversion_tolerance:
        raise InversionQualityError(
            f"Reconstrucción de {image.image_id} con error {error:.4f} > {config.inversion_tolerance}",
            reconstruction_error=error, tolerance=config.inversion_tolerance,
        )
    logger.debug(f"Inversión {image.image_id}: error={error:.4f}")
    return LatentTrajectory(handle=handle, reconstruction_error=error, image_id=image.image_id,
                            caption_text=caption.text, size=size)


# ==================== EDICIÓN ====================

def _decode_raster(data: bytes, context: Dict[str, Any]) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise GenerationError(f"Imagen generada no decodificable: {e}", context)


def edit_image(trajectory: LatentTrajectory, edit: CaptionEdit, config: GenerationConfig,
               backend: GeneratorBackend, writer: SyntheticMediaWriter,
               image_id: Optional[str] = None, split: Split = Split.TRAIN) -> Tuple[np.ndarray, ImageRecord]:
    """
    Genera el raster contrafactual y lo escribe como imagen sintética.

    Raises:
        EditValidationError: edición que no pasa validate_edit
        GenerationError: fallo del backend (con contexto de la edición)
    """
    violations = validate_edit(edit)
    if violations:
        raise EditValidationError(
            f"Edición inválida para generar: {[v.code for v in violations]}", violations=violations
        )
    mode = edit_mode_for(edit)
    context = _edit_context(edit, edit_mode=mode, seed=config.seed)
    if trajectory.image_id != edit.reference_caption.image_id:
        raise GenerationError("La trayectoria no corresponde a la imagen de la edición", context)

    image_id = image_id or writer.next_id()

    if backend.kind == GeneratorKind.TOY:
        scene = trajectory.handle
        if scene.value(edit.kind) != edit.old_value:
            raise GenerationError(
                f"La escena no contiene '{edit.old_value}' como {edit.kind.value}", context
            )
        edited = scene.with_value(edit.kind, edit.new_value)
        try:
            raster = render_scene(edited, backend.vocabulary, size=trajectory.size)
        except ValueError as e:
            raise GenerationError(f"Edición fuera del mundo de juguete: {e}", context)
        record = writer.write(image_id, raster, split, scene=edited)
        return raster, record

    body = {
        "trajectory_id": trajectory.handle,
        "source_caption": edit.reference_caption.text,
        "target_caption": edit.counterfactual_caption.text,
        "cross_frac": config.cross_attention_injection_fraction,
        "self_frac": config.self_attention_injection_fraction,
        "guidance": config.guidance_scale,
        "seed": config.seed,
        "output_size": config.output_size,
        "controller": mode,
        "blend_words": [edit.old_value, edit.new_value],
    }
    try:
        payload = require_fields(_client(backend).post_json("edit", body), ["image"], "edit")
        data = decode_image_payload(payload["image"])
    except BackendUnavailableError:
        raise
    except BackendError as e:
        raise GenerationError(f"Edición fallida para {edit.reference_caption.image_id}: {e}", context) from e

    raster = _decode_raster(data, context)
    record = writer.write(image_id, raster, split)
    return raster, record


def generate_target(image: ImageRecord, edit: CaptionEdit, config: GenerationConfig,
                    backend: GeneratorBackend, writer: SyntheticMediaWriter, root=".",
                    image_id: Optional[str] = None,
                    triplet_id: Optional[str] = None) -> Union[Tuple[ImageRecord, Triplet], GenerationSkip]:
    """
    Inversión + edición; devuelve (registro sintético, tripleta sintética).

    Una inversión fuera de tolerancia devuelve GenerationSkip para que el
    llamador pueda sortear otra edición.
    """
    config.validate()
    try:
        trajectory = invert_image(image, edit.reference_caption, config, backend, root)
    except InversionQualityError as e:
        logger.warning(f"Intento omitido para {image.image_id}: {e}")
        return GenerationSkip(image.image_id, "inversion_quality", e.reconstruction_error)

    _, record = edit_image(trajectory, edit, config, backend, writer, image_id=image_id, split=image.split)
    triplet = Triplet(
        triplet_id=triplet_id or record.image_id,
        reference_image_id=image.image_id,
        modification_text=edit.modification_text,
        target_image_id=record.image_id,
        provenance=Provenance.SYNTHETIC,
        edit=edit,
        generation_seed=config.seed,
        edit_mode=edit_mode_for(edit),
        category=edit.kind.value,
    )
    return record, triplet
