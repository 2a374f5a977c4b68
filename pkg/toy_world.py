#!/usr/bin/env python3
"""
Toy World - Mundo procedural determinista para verificación a escala de escritorio
================================================================================
Escenas (atributos) → caption, raster 64×64 y metadatos sidecar:
- Vocabulario versionado en toy_vocabulary.json
- Plantilla de caption con tramos exactos por componente
- Render por regiones: marco (dominio), bloque central (sujeto/adjetivo),
  bloque de esquina (objeto) y fondo texturizado (resto)
- Constructor de datasets de juguete estilo CIRR con tripletas manuales

Versión: 1.0.0
"""

import json
import logging
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from forge_limits import LIMITS
from triplet_core import (
    ComponentKind, DatasetManifest, ImageRecord, Provenance, Source, Span, Split,
    Triplet, tokenize,
)

logger = logging.getLogger(__name__)

VOCABULARY_PATH = Path(__file__).parent / "toy_vocabulary.json"

DEFAULT_TEMPLATE = "a {domain} of a {adjective} {subject}[ with a {object}] on a {background} background"

# Frases "humanas" de las tripletas manuales del mundo de juguete
MANUAL_PHRASINGS = (
    "replace the {old} with {new}",
    "change the {old} to {new}",
    "make it {new} instead of {old}",
    "{new} instead of {old}",
)

# Códigos 4×4 del glifo de cada sujeto (un bit por celda)
_SUBJECT_GLYPHS = (0x9009, 0x0660, 0xF00F, 0x6996, 0xA5A5, 0x5A5A, 0x8421, 0x1248, 0xFF00, 0x00FF)

_SLOT_PATTERN = re.compile(r"(\{\w+\})")
_OPTIONAL_PATTERN = re.compile(r"\[([^\]]*)\]")


# ==================== VOCABULARIO ====================

class ToyVocabulary:
    """Vocabulario cerrado del mundo de juguete con su paleta de colores."""

    def __init__(self, data: Dict):
        self.version = int(data.get("version", 1))
        self._values = {kind: list(data[kind.value]) for kind in ComponentKind}
        self._palette = {
            kind: {name: tuple(rgb) for name, rgb in data["palette"][kind.value].items()}
            for kind in (ComponentKind.ADJECTIVE, ComponentKind.BACKGROUND,
                         ComponentKind.OBJECT, ComponentKind.DOMAIN)
        }

    @classmethod
    def load(cls, path=None) -> "ToyVocabulary":
        with open(path or VOCABULARY_PATH, "r", encoding="utf-8") as f:
            return cls(json.load(f))

    def values(self, kind: ComponentKind) -> List[str]:
        return list(self._values[kind])

    def contains(self, kind: ComponentKind, value: str) -> bool:
        return value in self._values[kind]

    def color(self, kind: ComponentKind, value: str) -> Tuple[int, int, int]:
        return self._palette[kind][value]

    def index(self, kind: ComponentKind, value: str) -> int:
        return self._values[kind].index(value)

    def all_tokens(self) -> List[str]:
        """Todos los tokens distintos del vocabulario (para chequeos de colisión)."""
        tokens = set()
        for kind in ComponentKind:
            for value in self._values[kind]:
                tokens.update(value.split())
        return sorted(tokens)


@lru_cache(maxsize=1)
def default_vocabulary() -> ToyVocabulary:
    return ToyVocabulary.load()


# ==================== ESCENAS ====================

@dataclass(frozen=True)
class SceneMeta:
    """Contenido visual de una escena de juguete."""
    subject: str
    adjective: str
    background: str
    domain: str
    object: Optional[str] = None

    def value(self, kind: ComponentKind) -> Optional[str]:
        return getattr(self, kind.value)

    def with_value(self, kind: ComponentKind, value: str) -> "SceneMeta":
        return replace(self, **{kind.value: value})

    def validate(self, vocab: Optional[ToyVocabulary] = None) -> None:
        vocab = vocab or default_vocabulary()
        for kind in ComponentKind:
            value = self.value(kind)
            if value is None and kind == ComponentKind.OBJECT:
                continue
            if not value or not vocab.contains(kind, value):
                raise ValueError(f"Valor fuera del vocabulario de juguete: {kind.value}={value!r}")

    def to_dict(self) -> Dict:
        return {kind.value: self.value(kind) for kind in ComponentKind}

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneMeta":
        return cls(
            subject=data["subject"],
            adjective=data["adjective"],
            background=data["background"],
            domain=data["domain"],
            object=data.get("object"),
        )


def write_sidecar(path, scene: SceneMeta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(scene.to_dict(), f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def read_sidecar(path) -> SceneMeta:
    """Lee el sidecar de escena (FileNotFoundError si no existe)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Sidecar de escena no encontrado: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return SceneMeta.from_dict(json.load(f))


# ==================== CAPTIONS ====================

def render_template(template: str, scene: SceneMeta) -> Tuple[str, Dict[ComponentKind, Span]]:
    """
    Aplica la plantilla a la escena y calcula el tramo de cada componente.

    Los segmentos entre corchetes solo se incluyen si todos sus campos existen.
    """
    def expand_optional(match):
        inner = match.group(1)
        slots = [s.strip("{}") for s in _SLOT_PATTERN.findall(inner)]
        return inner if all(getattr(scene, s, None) for s in slots) else ""

    expanded = _OPTIONAL_PATTERN.sub(expand_optional, template)

    tokens: List[str] = []
    pieces: List[str] = []
    components: Dict[ComponentKind, Span] = {}
    for part in _SLOT_PATTERN.split(expanded):
        if not part:
            continue
        if _SLOT_PATTERN.fullmatch(part):
            kind = ComponentKind(part.strip("{}"))
            value = scene.value(kind)
            if not value:
                raise ValueError(f"La plantilla usa '{kind.value}' pero la escena no lo define")
            start = len(tokens)
            tokens.extend(tokenize(value))
            components[kind] = (start, len(tokens))
            pieces.append(value)
        else:
            tokens.extend(tokenize(part))
            pieces.append(part)

    text = " ".join("".join(pieces).split())
    if tokenize(text) != tokens:
        raise ValueError(f"Plantilla inválida (los campos deben separarse por espacios): {template!r}")
    return text, components


# ==================== RENDER ====================

def _regions(size: int) -> Dict[str, Tuple[int, int]]:
    scale = size / 64.0
    return {
        "frame": (max(1, round(3 * scale)), 0),
        "subject": (int(20 * scale), int(44 * scale)),
        "object": (int(48 * scale), int(60 * scale)),
    }


def component_region(kind: ComponentKind, size: int = LIMITS.TOY_RASTER_SIZE,
                     scene: Optional[SceneMeta] = None) -> np.ndarray:
    """
    Máscara booleana de los píxeles que el valor de un componente puede alterar.

    Sin objeto en la escena, la esquina del objeto muestra fondo.
    """
    regions = _regions(size)
    frame_width = regions["frame"][0]
    frame = np.ones((size, size), dtype=bool)
    frame[frame_width:size - frame_width, frame_width:size - frame_width] = False

    subject = np.zeros((size, size), dtype=bool)
    s0, s1 = regions["subject"]
    subject[s0:s1, s0:s1] = True

    obj = np.zeros((size, size), dtype=bool)
    o0, o1 = regions["object"]
    obj[o0:o1, o0:o1] = True

    if kind == ComponentKind.DOMAIN:
        return frame
    if kind in (ComponentKind.SUBJECT, ComponentKind.ADJECTIVE):
        return subject
    if kind == ComponentKind.OBJECT:
        return obj & ~frame
    if scene is not None and scene.object is None:
        return ~(frame | subject)
    return ~(frame | subject | obj)


def _shade(rgb, factor: float = 0.55, offset: int = 60) -> np.ndarray:
    return np.clip(np.asarray(rgb, dtype=np.float64) * factor + offset, 0, 255).astype(np.uint8)


def render_scene(scene: SceneMeta, vocab: Optional[ToyVocabulary] = None,
                 size: int = LIMITS.TOY_RASTER_SIZE) -> np.ndarray:
    """Raster RGB uint8 determinista de la escena."""
    vocab = vocab or default_vocabulary()
    scene.validate(vocab)
    img = np.zeros((size, size, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]

    # Fondo: color base + textura propia de cada fondo
    bg_index = vocab.index(ComponentKind.BACKGROUND, scene.background)
    base = np.asarray(vocab.color(ComponentKind.BACKGROUND, scene.background), dtype=np.uint8)
    period = 4 + 2 * bg_index
    if bg_index % 2:
        texture = ((xx + yy) // period) % 2 == 0
    else:
        texture = (yy // period) % 2 == 0
    img[:] = base
    img[texture] = np.clip(base.astype(np.int16) + 25, 0, 255).astype(np.uint8)

    regions = _regions(size)

    # Objeto en la esquina inferior derecha
    if scene.object:
        o0, o1 = regions["object"]
        color = vocab.color(ComponentKind.OBJECT, scene.object)
        img[o0:o1, o0:o1] = color
        inset = max(1, (o1 - o0) // 4)
        img[o0 + inset:o1 - inset, o0 + inset:o1 - inset] = _shade(color)

    # Sujeto: bloque del color del adjetivo con el glifo del sujeto
    s0, s1 = regions["subject"]
    color = vocab.color(ComponentKind.ADJECTIVE, scene.adjective)
    img[s0:s1, s0:s1] = color
    glyph = _SUBJECT_GLYPHS[vocab.index(ComponentKind.SUBJECT, scene.subject)]
    cell = max(1, (s1 - s0) // 4)
    for bit in range(16):
        if glyph >> bit & 1:
            row, col = divmod(bit, 4)
            y0, x0 = s0 + row * cell, s0 + col * cell
            img[y0:y0 + cell, x0:x0 + cell] = _shade(color)

    # Marco del dominio
    frame_width = regions["frame"][0]
    frame_color = vocab.color(ComponentKind.DOMAIN, scene.domain)
    img[:frame_width, :] = frame_color
    img[-frame_width:, :] = frame_color
    img[:, :frame_width] = frame_color
    img[:, -frame_width:] = frame_color

    return img


def save_png(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")
    return path


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Imagen no encontrada: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def materialize_scene(scene: SceneMeta, root, image_id: str, split: Split,
                      source: Source = Source.ORIGINAL, vocab: Optional[ToyVocabulary] = None,
                      size: int = LIMITS.TOY_RASTER_SIZE, subdir: str = "images") -> ImageRecord:
    """Escribe PNG + sidecar bajo root y retorna el registro con uris relativas."""
    root = Path(root)
    uri = f"{subdir}/{image_id}.png"
    sidecar = f"{subdir}/{image_id}.scene.json"
    save_png(render_scene(scene, vocab, size), root / uri)
    write_sidecar(root / sidecar, scene)
    return ImageRecord(image_id=image_id, uri=uri, split=split, source=source, sidecar=sidecar)


# ==================== DATASET DE JUGUETE ====================

def random_scene(rng: np.random.Generator, vocab: Optional[ToyVocabulary] = None,
                 object_probability: float = 0.5) -> SceneMeta:
    vocab = vocab or default_vocabulary()

    def pick(kind):
        values = vocab.values(kind)
        return values[int(rng.integers(len(values)))]

    has_object = rng.random() < object_probability
    return SceneMeta(
        subject=pick(ComponentKind.SUBJECT),
        adjective=pick(ComponentKind.ADJECTIVE),
        background=pick(ComponentKind.BACKGROUND),
        domain=pick(ComponentKind.DOMAIN),
        object=pick(ComponentKind.OBJECT) if has_object else None,
    )


def random_variant(scene: SceneMeta, rng: np.random.Generator,
                   vocab: Optional[ToyVocabulary] = None) -> Tuple[SceneMeta, ComponentKind, str, str]:
    """Cambia un único componente de la escena por otro valor del vocabulario."""
    vocab = vocab or default_vocabulary()
    kinds = [k for k in ComponentKind if scene.value(k) is not None]
    kind = kinds[int(rng.integers(len(kinds)))]
    old = scene.value(kind)
    candidates = [v for v in vocab.values(kind) if v != old]
    new = candidates[int(rng.integers(len(candidates)))]
    return scene.with_value(kind, new), kind, old, new


def build_toy_world(root, name: str = "toy", train_families: int = 300, test_families: int = 100,
                    variants_per_family: int = 3, seed: int = 0,
                    size: int = LIMITS.TOY_RASTER_SIZE,
                    vocab: Optional[ToyVocabulary] = None) -> DatasetManifest:
    """
    Construye un dataset estilo CIRR: familias (escena base + variantes de un
    solo atributo) con tripletas manuales base → variante.
    """
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(seed)
    root = Path(root)
    images: List[ImageRecord] = []
    triplets: List[Triplet] = []

    for split, n_families in ((Split.TRAIN, train_families), (Split.TEST, test_families)):
        for family in range(n_families):
            base = random_scene(rng, vocab)
            base_id = f"{name}-{split.value}-{family:05d}-0"
            images.append(materialize_scene(base, root, base_id, split, vocab=vocab, size=size))
            for v in range(1, variants_per_family + 1):
                variant, kind, old, new = random_variant(base, rng, vocab)
                variant_id = f"{name}-{split.value}-{family:05d}-{v}"
                images.append(materialize_scene(variant, root, variant_id, split, vocab=vocab, size=size))
                phrasing = MANUAL_PHRASINGS[int(rng.integers(len(MANUAL_PHRASINGS)))]
                triplets.append(Triplet(
                    triplet_id=f"{name}-{split.value}-{family:05d}-{v}",
                    reference_image_id=base_id,
                    modification_text=phrasing.format(old=old, new=new),
                    target_image_id=variant_id,
                    provenance=Provenance.MANUAL,
                    category=kind.value,
                ))

    logger.info(f"Mundo de juguete '{name}': {len(images)} imágenes, {len(triplets)} tripletas manuales")
    return DatasetManifest(name=name, root=str(root), images=tuple(images), triplets=tuple(triplets))
