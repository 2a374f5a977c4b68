#!/usr/bin/env python3
"""
Dataset IO - Archivos CIRR / FashionIQ, submuestreo y fusión de tripletas
========================================================================
- Carga de los esquemas públicos de CIRR y FashionIQ sin modificarlos
- Submuestreo de imágenes por permutación sembrada (prefijos anidados)
- Fusión de tripletas manuales con sintéticas (procedencia preservada)
- Exportación a ambos esquemas
- Minado de pares por captions que difieren en un único componente

Versión: 1.0.0
"""

import json
import logging
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from caption_perturber import MODIFICATION_TEMPLATE, parse_components, shift_components
from counterfactual_generator import edit_mode_for
from forge_errors import DatasetLoadError, MergeError
from forge_limits import LIMITS
from triplet_core import (
    KIND_ORDER, Caption, CaptionEdit, DatasetManifest, ImageRecord, Provenance, Split, Triplet,
)

logger = logging.getLogger(__name__)

FASHIONIQ_CATEGORIES = ("dress", "shirt", "toptee")
FASHIONIQ_JOIN = " and "

# Valores k por defecto de cada protocolo
CIRR_KS = (1, 5, 10, 50)
FASHIONIQ_KS = (10, 50)

_CIRR_FIELDS = ("pairid", "reference", "target_hard", "caption")
_FASHIONIQ_FIELDS = ("candidate", "target", "captions")
_FILE_PATTERN = re.compile(r"^(?:cap|split)\.([\w-]+)\.(train|val|test)\.json$")


def _read_json(path) -> object:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Archivo de dataset no encontrado: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"{path.name}: JSON inválido ({e})")


def _split_from_name(path, default: Split = Split.TRAIN) -> Tuple[Optional[str], Split]:
    """(tag, split) a partir de nombres tipo cap.rc2.train.json / cap.dress.val.json."""
    match = _FILE_PATTERN.match(Path(path).name)
    if not match:
        return None, default
    return match.group(1), Split(match.group(2))


# ==================== CIRR ====================

def load_cirr(captions_file, split_file, root, split: Optional[Split] = None,
              name: str = "cirr") -> DatasetManifest:
    """
    Carga un split de CIRR: registros {pairid, reference, target_hard, caption}
    y el archivo de split {nombre_imagen: ruta_relativa}.

    Raises:
        DatasetLoadError: esquema inesperado (se indica el primer registro malo)
    """
    _, file_split = _split_from_name(captions_file)
    split = split or file_split

    paths = _read_json(split_file)
    if not isinstance(paths, dict):
        raise DatasetLoadError(f"{Path(split_file).name}: se esperaba un objeto nombre → ruta")
    images = [
        ImageRecord(image_id=name_, uri=str(uri)[2:] if str(uri).startswith("./") else str(uri), split=split)
        for name_, uri in paths.items()
    ]

    records = _read_json(captions_file)
    if not isinstance(records, list):
        raise DatasetLoadError(f"{Path(captions_file).name}: se esperaba una lista de registros")

    triplets: List[Triplet] = []
    seen = set()
    for index, record in enumerate(records):
        if not isinstance(record, dict) or any(f not in record for f in _CIRR_FIELDS):
            raise DatasetLoadError(f"Registro CIRR #{index} no cumple el esquema {_CIRR_FIELDS}: {record!r}",
                                   record_index=index)
        if not isinstance(record["caption"], str) or isinstance(record["pairid"], bool):
            raise DatasetLoadError(f"Registro CIRR #{index} con tipos inválidos", record_index=index)
        triplet_id = str(record.get("triplet_id", record["pairid"]))
        if triplet_id in seen:
            raise DatasetLoadError(f"Registro CIRR #{index}: pairid duplicado {triplet_id}", record_index=index)
        for endpoint in (record["reference"], record["target_hard"]):
            if endpoint not in paths:
                raise DatasetLoadError(
                    f"Registro CIRR #{index}: imagen '{endpoint}' ausente del archivo de split",
                    record_index=index,
                )
        seen.add(triplet_id)
        triplets.append(Triplet(
            triplet_id=triplet_id,
            reference_image_id=record["reference"],
            modification_text=record["caption"],
            target_image_id=record["target_hard"],
            provenance=Provenance(record.get("provenance", Provenance.MANUAL.value)),
            raw_captions=(record["caption"],),
        ))

    logger.info(f"CIRR {split.value}: {len(images)} imágenes, {len(triplets)} tripletas")
    return DatasetManifest(name=name, root=str(root), images=tuple(images), triplets=tuple(triplets))


# ==================== FASHIONIQ ====================

def _load_fashioniq_file(path) -> Tuple[str, Split, list]:
    category, split = _split_from_name(path)
    records = _read_json(path)
    if not isinstance(records, list):
        raise DatasetLoadError(f"{Path(path).name}: se esperaba una lista de registros")
    return category or Path(path).stem, split, records


def load_fashioniq(captions_files: Sequence, root, image_subdir: str = "images",
                   extension: str = ".png", name: str = "fashioniq") -> DatasetManifest:
    """
    Carga archivos cap.{categoría}.{split}.json con registros
    {candidate, target, captions}; los captions se unen con " and ".

    Raises:
        DatasetLoadError: esquema inesperado (se indica el primer registro malo)
    """
    paths = [Path(p) for p in captions_files]
    with ThreadPoolExecutor(max_workers=LIMITS.clamp_workers(len(paths) or 1)) as executor:
        loaded = list(executor.map(_load_fashioniq_file, paths))

    images: Dict[str, ImageRecord] = {}
    triplets: List[Triplet] = []
    for path, (category, split, records) in zip(paths, loaded):
        for index, record in enumerate(records):
            if not isinstance(record, dict) or any(f not in record for f in _FASHIONIQ_FIELDS):
                raise DatasetLoadError(
                    f"{path.name} registro #{index} no cumple el esquema {_FASHIONIQ_FIELDS}: {record!r}",
                    record_index=index,
                )
            captions = record["captions"]
            if (not isinstance(captions, list) or not captions
                    or not all(isinstance(c, str) for c in captions)):
                raise DatasetLoadError(f"{path.name} registro #{index}: captions inválidos", record_index=index)
            parts = [c.strip() for c in captions if c.strip()]
            if not parts:
                raise DatasetLoadError(f"{path.name} registro #{index}: captions vacíos", record_index=index)

            for image_id in (record["candidate"], record["target"]):
                if image_id not in images:
                    images[image_id] = ImageRecord(
                        image_id=image_id, uri=f"{image_subdir}/{image_id}{extension}", split=split
                    )
            triplets.append(Triplet(
                triplet_id=str(record.get("triplet_id", f"{category}-{index}")),
                reference_image_id=record["candidate"],
                modification_text=FASHIONIQ_JOIN.join(parts),
                target_image_id=record["target"],
                provenance=Provenance(record.get("provenance", Provenance.MANUAL.value)),
                category=category,
                raw_captions=tuple(captions),
            ))

    logger.info(f"FashionIQ: {len(images)} imágenes, {len(triplets)} tripletas en {len(paths)} archivo(s)")
    return DatasetManifest(name=name, root=str(root), images=tuple(images.values()), triplets=tuple(triplets))


# ==================== SUBMUESTREO ====================

def subsample_count(total: int, fraction: float) -> int:
    """round_half_up(fraction × total)."""
    return int((Decimal(str(fraction)) * total).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def subsample_order(manifest: DatasetManifest, seed: int) -> List[str]:
    """Permutación sembrada de los ids; cada fracción toma un prefijo."""
    ids = sorted(img.image_id for img in manifest.images)
    permutation = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in permutation]


def subsample_images(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """
    Conserva round_half_up(fraction × |imágenes|) imágenes y exactamente las
    tripletas con ambos extremos conservados.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction debe estar en (0, 1]: {fraction}")
    n_keep = subsample_count(len(manifest.images), fraction)
    if n_keep == len(manifest.images):
        return manifest

    keep = set(subsample_order(manifest, seed)[:n_keep])
    images = [img for img in manifest.images if img.image_id in keep]
    triplets = [t for t in manifest.triplets
                if t.reference_image_id in keep and t.target_image_id in keep]
    logger.info(f"Submuestreo {fraction:.0%}: {len(images)}/{len(manifest.images)} imágenes, "
                f"{len(triplets)}/{len(manifest.triplets)} tripletas")
    return manifest.with_contents(images=images, triplets=triplets)


# ==================== FUSIÓN ====================

def rebase_record(record: ImageRecord, source_root: str, target_root: str) -> ImageRecord:
    if os.path.abspath(source_root) == os.path.abspath(target_root):
        return record

    def rel(uri: Optional[str]) -> Optional[str]:
        if uri is None:
            return None
        absolute = os.path.join(os.path.abspath(source_root), uri)
        return Path(os.path.relpath(absolute, os.path.abspath(target_root))).as_posix()

    return replace(record, uri=rel(record.uri), sidecar=rel(record.sidecar))


def merge(manual: DatasetManifest, synthetic: DatasetManifest) -> DatasetManifest:
    """
    Unión de imágenes y tripletas. Las uris del segundo manifiesto se
    re-expresan respecto a la raíz del primero.

    Raises:
        MergeError: registros distintos bajo el mismo id
    """
    if not synthetic.images and not synthetic.triplets:
        return manual

    images = list(manual.images)
    image_index = manual.image_index()
    for record in synthetic.images:
        record = rebase_record(record, synthetic.root, manual.root)
        existing = image_index.get(record.image_id)
        if existing is None:
            image_index[record.image_id] = record
            images.append(record)
        elif existing != record:
            raise MergeError(f"Imagen '{record.image_id}' en conflicto: {existing} != {record}")

    triplets = list(manual.triplets)
    triplet_index = {t.triplet_id: t for t in manual.triplets}
    for trip in synthetic.triplets:
        existing = triplet_index.get(trip.triplet_id)
        if existing is None:
            triplet_index[trip.triplet_id] = trip
            triplets.append(trip)
        elif existing != trip:
            raise MergeError(f"Tripleta '{trip.triplet_id}' en conflicto entre manifiestos")

    return manual.with_contents(images=images, triplets=triplets)


# ==================== EXPORTACIÓN ====================

def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def export_cirr(manifest: DatasetManifest, out_dir, split: Split = Split.TRAIN,
                tag: str = "rc2") -> Tuple[Path, Path]:
    """
    Escribe cap.{tag}.{split}.json y split.{tag}.{split}.json.

    pairid es el entero original si lo hay; las demás tripletas reciben
    enteros a partir del mayor pairid original. El id de la tripleta se
    conserva en 'triplet_id' (campo extra que el loader respeta).
    """
    out_dir = Path(out_dir)
    images = [img for img in manifest.images if img.split == split]
    keep = {img.image_id for img in images}
    selected = [t for t in manifest.triplets if t.reference_image_id in keep]
    next_pairid = max((int(t.triplet_id) for t in selected if t.triplet_id.isdigit()), default=-1) + 1
    records = []
    for trip in selected:
        if trip.triplet_id.isdigit():
            pairid = int(trip.triplet_id)
        else:
            pairid = next_pairid
            next_pairid += 1
        records.append({
            "pairid": pairid,
            "reference": trip.reference_image_id,
            "target_hard": trip.target_image_id,
            "caption": trip.modification_text,
            "triplet_id": trip.triplet_id,
            "provenance": trip.provenance.value,
        })
    split_paths = {img.image_id: f"./{img.uri}" for img in images}

    captions_path = _write_json(out_dir / "captions" / f"cap.{tag}.{split.value}.json", records)
    split_path = _write_json(out_dir / "image_splits" / f"split.{tag}.{split.value}.json", split_paths)
    logger.info(f"Exportado CIRR: {len(records)} tripletas → {captions_path}")
    return captions_path, split_path


def export_fashioniq(manifest: DatasetManifest, out_dir, split: Split = Split.TRAIN,
                     default_category: str = "all") -> List[Path]:
    """Un archivo cap.{categoría}.{split}.json por categoría de tripleta."""
    out_dir = Path(out_dir)
    index = manifest.image_index()
    groups: Dict[str, list] = defaultdict(list)
    for trip in manifest.triplets:
        if index[trip.reference_image_id].split != split:
            continue
        captions = list(trip.raw_captions) or [trip.modification_text]
        groups[trip.category or default_category].append({
            "candidate": trip.reference_image_id,
            "target": trip.target_image_id,
            "captions": captions,
            "triplet_id": trip.triplet_id,
            "provenance": trip.provenance.value,
        })
    written = [
        _write_json(out_dir / "captions" / f"cap.{category}.{split.value}.json", records)
        for category, records in sorted(groups.items())
    ]
    logger.info(f"Exportado FashionIQ: {len(written)} categoría(s) en {out_dir}")
    return written


# ==================== MINADO POR CAPTIONS ====================

def mine_caption_pairs(manifest: DatasetManifest, captions: Mapping[str, Caption],
                       max_pairs: Optional[int] = None) -> DatasetManifest:
    """
    Empareja imágenes existentes cuyos captions difieren exactamente en el
    tramo de un componente (mismo texto fuera del tramo, distinto valor).

    Cada imagen se empareja como referencia con la siguiente de su grupo
    (orden por id), así que el resultado es determinista. Devuelve un
    manifiesto con solo las tripletas minadas.
    """
    index = manifest.image_index()
    existing = {(t.reference_image_id, t.target_image_id) for t in manifest.triplets}
    groups: Dict[tuple, List[Tuple[str, Caption]]] = defaultdict(list)

    for image_id in sorted(captions):
        if image_id not in index:
            continue
        caption = parse_components(captions[image_id])
        tokens = caption.tokens
        for kind, (start, end) in (caption.components or {}).items():
            key = (index[image_id].split, kind, tuple(tokens[:start]), tuple(tokens[end:]))
            groups[key].append((image_id, caption))

    triplets: List[Triplet] = []
    for key in sorted(groups, key=lambda k: (k[0].value, KIND_ORDER.index(k[1]), k[2], k[3])):
        members = groups[key]
        kind = key[1]
        if len(members) < 2:
            continue
        for position, (ref_id, ref_caption) in enumerate(members):
            target_id, target_caption = members[(position + 1) % len(members)]
            old, new = ref_caption.value_of(kind), target_caption.value_of(kind)
            if old == new or (ref_id, target_id) in existing:
                continue
            span_ref = ref_caption.components[kind]
            span_cf = target_caption.components[kind]
            modification = MODIFICATION_TEMPLATE.format(old=old, new=new)
            edit = CaptionEdit(
                reference_caption=ref_caption,
                counterfactual_caption=Caption(
                    image_id=ref_id, text=target_caption.text,
                    components=shift_components(ref_caption.components, span_ref, span_cf),
                ),
                modification_text=modification,
                kind=kind,
                changed_span_ref=span_ref,
                changed_span_cf=span_cf,
            )
            existing.add((ref_id, target_id))
            triplets.append(Triplet(
                triplet_id=f"{manifest.name}-mined-{len(triplets):06d}",
                reference_image_id=ref_id,
                modification_text=modification,
                target_image_id=target_id,
                provenance=Provenance.MINED,
                edit=edit,
                edit_mode=edit_mode_for(edit),
                category=kind.value,
            ))
            if max_pairs is not None and len(triplets) >= max_pairs:
                break
        if max_pairs is not None and len(triplets) >= max_pairs:
            break

    logger.info(f"Pares minados por captions: {len(triplets)}")
    return manifest.with_contents(images=(), triplets=triplets)
