#!/usr/bin/env python3
"""
Triplet Core - Tipos de dominio y manifiesto de dataset
=======================================================
Tipos compartidos por todos los módulos del forjador:
- Registros de imagen, captions con tramos por componente
- Ediciones de caption y tripletas ⟨referencia, texto, objetivo⟩
- Manifiesto de dataset con estadísticas derivadas
- Validación de invariantes y serialización JSON canónica

Versión: 1.0.0
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from forge_errors import ManifestIntegrityError

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1

Span = Tuple[int, int]

_TERMINAL_PUNCTUATION = ".,;:!?\"'"


# ==================== ENUMS ====================

class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Source(str, Enum):
    ORIGINAL = "original"
    SYNTHETIC = "synthetic"


class Provenance(str, Enum):
    MANUAL = "manual"
    SYNTHETIC = "synthetic"
    # Pares minados por similitud de captions (sin generación)
    MINED = "mined"


class ComponentKind(str, Enum):
    SUBJECT = "subject"
    OBJECT = "object"
    BACKGROUND = "background"
    ADJECTIVE = "adjective"
    DOMAIN = "domain"


KIND_ORDER = list(ComponentKind)


# ==================== TOKENIZACIÓN ====================

def normalize_token(word: str) -> str:
    """Minúsculas y sin puntuación terminal."""
    return word.lower().rstrip(_TERMINAL_PUNCTUATION)


def tokenize(text: str) -> List[str]:
    """Tokens = palabras separadas por espacios, normalizadas."""
    return [tok for tok in (normalize_token(w) for w in text.split()) if tok]


def token_positions(text: str) -> List[Tuple[int, int]]:
    """Posiciones (inicio, fin) en caracteres de cada token no vacío."""
    positions = []
    for match in re.finditer(r"\S+", text):
        if normalize_token(match.group()):
            positions.append((match.start(), match.end()))
    return positions


def span_text(tokens: List[str], span: Span) -> str:
    return " ".join(tokens[span[0]:span[1]])


# ==================== TIPOS DE DOMINIO ====================

@dataclass(frozen=True)
class ImageRecord:
    """Imagen del manifiesto; uri relativa a la raíz del manifiesto."""
    image_id: str
    uri: str
    split: Split
    source: Source = Source.ORIGINAL
    sidecar: Optional[str] = None


@dataclass(frozen=True)
class Caption:
    """Caption de una imagen con tramos [inicio, fin) de tokens por componente."""
    image_id: str
    text: str
    components: Optional[Mapping[ComponentKind, Span]] = None

    @property
    def tokens(self) -> List[str]:
        return tokenize(self.text)

    def value_of(self, kind: ComponentKind) -> Optional[str]:
        """Texto normalizado del componente, si está localizado."""
        if not self.components or kind not in self.components:
            return None
        return span_text(self.tokens, self.components[kind])


@dataclass(frozen=True)
class CaptionEdit:
    """Salida de la generación de caption contrafactual: caption de referencia, contrafactual y texto de modificación."""
    reference_caption: Caption
    counterfactual_caption: Caption
    modification_text: str
    kind: ComponentKind
    changed_span_ref: Span
    changed_span_cf: Span

    @property
    def old_value(self) -> str:
        return span_text(self.reference_caption.tokens, self.changed_span_ref)

    @property
    def new_value(self) -> str:
        return span_text(self.counterfactual_caption.tokens, self.changed_span_cf)


@dataclass(frozen=True)
class Triplet:
    """Tripleta (referencia, texto de modificación, objetivo) con procedencia y metadatos de edición."""
    triplet_id: str
    reference_image_id: str
    modification_text: str
    target_image_id: str
    provenance: Provenance = Provenance.MANUAL
    edit: Optional[CaptionEdit] = None
    generation_seed: Optional[int] = None
    # 'replace' (intercambio de palabras) o 'refine' (cambia la longitud)
    edit_mode: Optional[str] = None
    category: Optional[str] = None
    raw_captions: Tuple[str, ...] = ()


@dataclass(frozen=True)
class StatsTable:
    """Conteos del manifiesto (misma forma que la tabla de estadísticas)."""
    images: int = 0
    triplets: int = 0
    train_images: int = 0
    val_images: int = 0
    test_images: int = 0
    synthetic_images: int = 0
    train_triplets: int = 0
    synthetic_triplets: int = 0
    mined_triplets: int = 0
    val_triplets: int = 0
    test_triplets: int = 0

    def as_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Violation:
    """Violación de invariante con código legible por máquina."""
    code: str
    subject_id: str
    detail: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    """
    Imágenes + tripletas; las estadísticas se recalculan siempre.

    La raíz se guarda siempre absoluta.
    """
    name: str
    root: str = "."
    images: Tuple[ImageRecord, ...] = ()
    triplets: Tuple[Triplet, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "root", os.path.abspath(self.root))

    @property
    def stats(self) -> StatsTable:
        return compute_stats(self)

    def image_index(self) -> Dict[str, ImageRecord]:
        return {img.image_id: img for img in self.images}

    def resolve(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.uri

    def with_contents(self, images: Optional[Iterable[ImageRecord]] = None,
                      triplets: Optional[Iterable[Triplet]] = None, **changes) -> "DatasetManifest":
        """Reemplazo completo (los tipos son inmutables)."""
        if images is not None:
            changes["images"] = tuple(images)
        if triplets is not None:
            changes["triplets"] = tuple(triplets)
        return replace(self, **changes)


# ==================== VALIDACIÓN ====================

def caption_span_violations(caption: Caption) -> List[Violation]:
    """Tramos dentro de rango, no vacíos y sin solapamiento."""
    violations = []
    if not caption.text.strip():
        violations.append(Violation("empty_caption", caption.image_id))
    if not caption.components:
        return violations

    n_tokens = len(caption.tokens)
    spans = sorted(caption.components.values())
    for kind, (start, end) in caption.components.items():
        if not (0 <= start < end <= n_tokens):
            violations.append(Violation(
                "invalid_span", caption.image_id, f"{kind.value}=({start}, {end}) con {n_tokens} tokens"
            ))
    for (_, prev_end), (next_start, _) in zip(spans, spans[1:]):
        if next_start < prev_end:
            violations.append(Violation("overlapping_spans", caption.image_id))
            break
    return violations


def validate_manifest(manifest: DatasetManifest) -> List[Violation]:
    """Lista vacía si y solo si se cumplen todos los invariantes de tipo."""
    violations: List[Violation] = []

    seen_images = set()
    for img in manifest.images:
        if img.image_id in seen_images:
            violations.append(Violation("duplicate_image_id", img.image_id))
        seen_images.add(img.image_id)

    seen_triplets = set()
    provenanced_targets = set()
    for trip in manifest.triplets:
        if trip.triplet_id in seen_triplets:
            violations.append(Violation("duplicate_triplet_id", trip.triplet_id))
        seen_triplets.add(trip.triplet_id)

        for endpoint in (trip.reference_image_id, trip.target_image_id):
            if endpoint not in seen_images:
                violations.append(Violation(
                    "dangling_reference", endpoint, f"tripleta {trip.triplet_id}"
                ))
        if trip.reference_image_id == trip.target_image_id:
            violations.append(Violation("self_pair", trip.triplet_id, trip.reference_image_id))
        if not trip.modification_text.strip():
            violations.append(Violation("empty_modification", trip.triplet_id))

        if trip.provenance == Provenance.SYNTHETIC:
            if trip.edit is None:
                violations.append(Violation("missing_edit", trip.triplet_id))
            else:
                if trip.edit.modification_text != trip.modification_text:
                    violations.append(Violation("modification_mismatch", trip.triplet_id))
                provenanced_targets.add(trip.target_image_id)

        if trip.edit is not None:
            for caption in (trip.edit.reference_caption, trip.edit.counterfactual_caption):
                for v in caption_span_violations(caption):
                    violations.append(Violation(v.code, trip.triplet_id, v.detail))

    for img in manifest.images:
        if img.source == Source.SYNTHETIC and img.image_id not in provenanced_targets:
            violations.append(Violation("synthetic_without_provenance", img.image_id))

    return violations


def compute_stats(manifest: DatasetManifest) -> StatsTable:
    """
    Conteos de imágenes y tripletas por split/procedencia.

    La split de una tripleta es la de su imagen de referencia.

    Raises:
        ManifestIntegrityError: si una tripleta apunta a una imagen inexistente.
    """
    index = manifest.image_index()
    counts = {name: 0 for name in StatsTable.__dataclass_fields__}
    counts["images"] = len(manifest.images)
    counts["triplets"] = len(manifest.triplets)

    for img in manifest.images:
        if img.source == Source.SYNTHETIC:
            counts["synthetic_images"] += 1
        else:
            counts[f"{img.split.value}_images"] += 1

    for trip in manifest.triplets:
        for endpoint in (trip.reference_image_id, trip.target_image_id):
            if endpoint not in index:
                raise ManifestIntegrityError(
                    f"Tripleta {trip.triplet_id} apunta a imagen inexistente '{endpoint}'",
                    triplet_id=trip.triplet_id,
                )
        if trip.provenance == Provenance.SYNTHETIC:
            counts["synthetic_triplets"] += 1
        elif trip.provenance == Provenance.MINED:
            counts["mined_triplets"] += 1
        else:
            counts[f"{index[trip.reference_image_id].split.value}_triplets"] += 1

    return StatsTable(**counts)


# ==================== SERIALIZACIÓN ====================

def _span_list(span: Optional[Span]):
    return None if span is None else [int(span[0]), int(span[1])]


def caption_to_dict(caption: Caption) -> dict:
    components = None
    if caption.components is not None:
        components = {
            kind.value: _span_list(caption.components[kind])
            for kind in KIND_ORDER if kind in caption.components
        }
    return {"image_id": caption.image_id, "text": caption.text, "components": components}


def caption_from_dict(data: dict) -> Caption:
    components = data.get("components")
    if components is not None:
        components = {ComponentKind(k): (int(v[0]), int(v[1])) for k, v in components.items()}
    return Caption(image_id=data["image_id"], text=data["text"], components=components)


def edit_to_dict(edit: CaptionEdit) -> dict:
    return {
        "reference_caption": caption_to_dict(edit.reference_caption),
        "counterfactual_caption": caption_to_dict(edit.counterfactual_caption),
        "modification_text": edit.modification_text,
        "kind": edit.kind.value,
        "changed_span_ref": _span_list(edit.changed_span_ref),
        "changed_span_cf": _span_list(edit.changed_span_cf),
    }


def edit_from_dict(data: dict) -> CaptionEdit:
    return CaptionEdit(
        reference_caption=caption_from_dict(data["reference_caption"]),
        counterfactual_caption=caption_from_dict(data["counterfactual_caption"]),
        modification_text=data["modification_text"],
        kind=ComponentKind(data["kind"]),
        changed_span_ref=tuple(data["changed_span_ref"]),
        changed_span_cf=tuple(data["changed_span_cf"]),
    )


def image_to_dict(img: ImageRecord) -> dict:
    return {
        "image_id": img.image_id,
        "uri": img.uri,
        "split": img.split.value,
        "source": img.source.value,
        "sidecar": img.sidecar,
    }


def image_from_dict(data: dict) -> ImageRecord:
    return ImageRecord(
        image_id=data["image_id"],
        uri=data["uri"],
        split=Split(data["split"]),
        source=Source(data.get("source", Source.ORIGINAL.value)),
        sidecar=data.get("sidecar"),
    )


def triplet_to_dict(trip: Triplet) -> dict:
    return {
        "triplet_id": trip.triplet_id,
        "reference_image_id": trip.reference_image_id,
        "modification_text": trip.modification_text,
        "target_image_id": trip.target_image_id,
        "provenance": trip.provenance.value,
        "edit": edit_to_dict(trip.edit) if trip.edit else None,
        "generation_seed": trip.generation_seed,
        "edit_mode": trip.edit_mode,
        "category": trip.category,
        "raw_captions": list(trip.raw_captions),
    }


def triplet_from_dict(data: dict) -> Triplet:
    edit = data.get("edit")
    return Triplet(
        triplet_id=str(data["triplet_id"]),
        reference_image_id=data["reference_image_id"],
        modification_text=data["modification_text"],
        target_image_id=data["target_image_id"],
        provenance=Provenance(data.get("provenance", Provenance.MANUAL.value)),
        edit=edit_from_dict(edit) if edit else None,
        generation_seed=data.get("generation_seed"),
        edit_mode=data.get("edit_mode"),
        category=data.get("category"),
        raw_captions=tuple(data.get("raw_captions") or ()),
    )


def manifest_to_dict(manifest: DatasetManifest, root: Optional[str] = None) -> dict:
    return {
        "name": manifest.name,
        "root": manifest.root if root is None else root,
        "format_version": MANIFEST_FORMAT_VERSION,
        "images": [image_to_dict(img) for img in manifest.images],
        "triplets": [triplet_to_dict(trip) for trip in manifest.triplets],
    }


def manifest_from_dict(data: dict, root: Optional[str] = None) -> DatasetManifest:
    return DatasetManifest(
        name=data["name"],
        root=data.get("root", ".") if root is None else root,
        images=tuple(image_from_dict(d) for d in data.get("images", [])),
        triplets=tuple(triplet_from_dict(d) for d in data.get("triplets", [])),
    )


def dumps_manifest(manifest: DatasetManifest, root: Optional[str] = None) -> str:
    """JSON canónico (UTF-8, LF, orden de campos fijo)."""
    return json.dumps(manifest_to_dict(manifest, root), ensure_ascii=False, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """
    Guarda el manifiesto; la raíz se escribe relativa al directorio del archivo
    para que el manifiesto pueda reubicarse junto con sus medios.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    relative_root = os.path.relpath(os.path.abspath(manifest.root), os.path.abspath(path.parent))
    relative_root = Path(relative_root).as_posix()

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_manifest(manifest, root=relative_root))

    logger.info(f"Manifiesto guardado: {path} ({len(manifest.images)} imágenes, {len(manifest.triplets)} tripletas)")
    return path


def load_manifest(path) -> DatasetManifest:
    """Carga un manifiesto resolviendo la raíz respecto al archivo."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    root = os.path.normpath(os.path.join(os.path.abspath(path.parent), data.get("root", ".")))
    return manifest_from_dict(data, root=root)


def split_manifest(manifest: DatasetManifest, split: Split) -> DatasetManifest:
    """Sub-manifiesto con las imágenes de una split y sus tripletas internas."""
    images = [img for img in manifest.images if img.split == split]
    keep = {img.image_id for img in images}
    triplets = [t for t in manifest.triplets
                if t.reference_image_id in keep and t.target_image_id in keep]
    return manifest.with_contents(images=images, triplets=triplets)
