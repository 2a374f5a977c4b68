#!/usr/bin/env python3
"""
Retrieval Eval - Recuperación compuesta: ranking de galería y Recall@k
=====================================================================
- Vectores de embedding normalizados y similitud coseno
- Ranking determinista (empates resueltos por id ascendente)
- Recall@k por consulta ⟨imagen de referencia, texto⟩
- Tablas de resultados en texto de ancho fijo y CSV

Versión: 1.0.0
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from forge_errors import EvaluationError
from forge_limits import LIMITS
from triplet_core import DatasetManifest, ImageRecord, Split

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, "EmbeddingVector", Sequence[float]]


# ==================== TIPOS ====================

@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Vector de embedding de dimensión fija con entradas finitas."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise ValueError("El embedding debe ser no vacío y finito")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def normalize(self) -> "EmbeddingVector":
        return EmbeddingVector(normalize(self.values))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def normalize(values: ArrayLike) -> np.ndarray:
    """Normalización L2 (el vector nulo se devuelve sin cambios)."""
    values = np.asarray(values, dtype=np.float64)
    norm = np.linalg.norm(values)
    return values / norm if norm > 0 else values


def unit_embedding(values: ArrayLike) -> np.ndarray:
    """Valida como EmbeddingVector y devuelve el vector normalizado."""
    vector = values if isinstance(values, EmbeddingVector) else EmbeddingVector(values)
    return vector.normalize().values


@dataclass(frozen=True)
class EvalConfig:
    ks: Tuple[int, ...] = (1, 5, 10, 50)
    exclude_reference: bool = True
    # Rankings por consulta a conservar (0 = ninguno)
    top_n: int = 0
    workers: int = 1

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks:
            raise ValueError("ks no puede estar vacío")
        if any(k < 1 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"ks debe ser estrictamente ascendente y positivo: {ks}")
        object.__setattr__(self, "ks", ks)


@dataclass(frozen=True)
class QueryRetrieval:
    """Resultado cualitativo de una consulta."""
    triplet_id: str
    reference_image_id: str
    modification_text: str
    target_image_id: str
    target_rank: int
    top_ids: Tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "triplet_id": self.triplet_id,
            "reference": self.reference_image_id,
            "modification": self.modification_text,
            "target": self.target_image_id,
            "target_rank": self.target_rank,
            "top": list(self.top_ids),
        }


@dataclass(frozen=True)
class EvalResult:
    recall_at: Dict[int, float]
    num_queries: int
    retrievals: Tuple[QueryRetrieval, ...] = field(default=(), compare=False)

    @property
    def ks(self) -> Tuple[int, ...]:
        return tuple(self.recall_at)


class CIRModel(Protocol):
    """Interfaz mínima de un modelo de recuperación compuesta."""

    def image_embed(self, image: ImageRecord, root) -> ArrayLike: ...

    def text_embed(self, text: str) -> ArrayLike: ...

    def compose(self, image_vector: ArrayLike, text_vector: ArrayLike) -> ArrayLike: ...


# ==================== MÉTRICAS ====================

def recall_at_k(ranked_target_positions: Sequence[int], ks: Sequence[int]) -> EvalResult:
    """
    recall_at[k] = 100 × |{p ≤ k}| / n, redondeado a 2 decimales.

    Raises:
        EvaluationError: lista de posiciones vacía
        ValueError: posición < 1
    """
    positions = np.asarray(list(ranked_target_positions), dtype=np.int64)
    if positions.size == 0:
        raise EvaluationError("Recall@k no definido sin consultas")
    if np.any(positions < 1):
        raise ValueError("Las posiciones son 1-based (≥ 1)")
    n = int(positions.size)
    recall = {int(k): round(100.0 * int(np.count_nonzero(positions <= k)) / n, 2) for k in ks}
    return EvalResult(recall_at=recall, num_queries=n)


def _similarities(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # Suma por filas: filas idénticas producen similitudes idénticas
    return (matrix * query[None, :]).sum(axis=1)


def _ordered(ids: Sequence[str], sims: np.ndarray) -> List[str]:
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [ids[i] for i in order]


def rank_gallery(query: ArrayLike, gallery: Sequence[Tuple[str, ArrayLike]],
                 exclude_id: Optional[str] = None) -> List[str]:
    """
    Ids ordenados por similitud coseno descendente; empates por id ascendente.

    Raises:
        ValueError: dimensiones inconsistentes
    """
    q = unit_embedding(query)
    items = [(image_id, unit_embedding(vec)) for image_id, vec in gallery if image_id != exclude_id]
    if not items:
        return []
    for image_id, vec in items:
        if vec.shape != q.shape:
            raise ValueError(f"Dimensión de '{image_id}' {vec.shape} != consulta {q.shape}")
    ids = [image_id for image_id, _ in items]
    matrix = np.stack([vec for _, vec in items])
    return _ordered(ids, _similarities(q, matrix))


# ==================== EVALUACIÓN ====================

@dataclass
class _Gallery:
    ids: List[str]
    matrix: np.ndarray
    position: Dict[str, int]


def _checked(values: ArrayLike, what: str, triplet_id: Optional[str] = None) -> np.ndarray:
    try:
        return unit_embedding(values)
    except ValueError as e:
        raise EvaluationError(f"Embedding inválido para {what}: {e}", triplet_id=triplet_id) from e


def _build_gallery(model: CIRModel, manifest: DatasetManifest, split: Split) -> _Gallery:
    images = sorted((img for img in manifest.images if img.split == split), key=lambda img: img.image_id)
    if not images:
        raise EvaluationError(f"Galería vacía para la split '{split.value}'")
    matrix = np.stack([_checked(model.image_embed(img, manifest.root), f"imagen '{img.image_id}'")
                       for img in images])
    ids = [img.image_id for img in images]
    return _Gallery(ids=ids, matrix=matrix, position={image_id: i for i, image_id in enumerate(ids)})


def _target_rank(gallery: _Gallery, query: np.ndarray, target_id: str,
                 exclude_id: Optional[str], top_n: int) -> Tuple[int, Tuple[str, ...]]:
    sims = _similarities(query, gallery.matrix)
    mask = np.ones(len(gallery.ids), dtype=bool)
    if exclude_id is not None and exclude_id in gallery.position:
        mask[gallery.position[exclude_id]] = False
    target = gallery.position[target_id]
    s_t = sims[target]
    # Rank = 1 + más similares + empatados con id menor (galería ordenada por id)
    ahead = mask & ((sims > s_t) | ((sims == s_t) & (np.arange(len(sims)) < target)))
    rank = 1 + int(np.count_nonzero(ahead))

    top: Tuple[str, ...] = ()
    if top_n > 0:
        candidates = np.flatnonzero(mask)
        order = np.lexsort((candidates, -sims[candidates]))[:top_n]
        top = tuple(gallery.ids[candidates[i]] for i in order)
    return rank, top


def evaluate(model: CIRModel, manifest: DatasetManifest, split: Split,
             config: Optional[EvalConfig] = None) -> EvalResult:
    """
    Recall@k de las tripletas cuya referencia pertenece a la split.

    La galería son todas las imágenes de la split; con exclude_reference la
    imagen de referencia se retira de su propia consulta (protocolo CIRR).

    Raises:
        EvaluationError: el objetivo de una tripleta no está en la galería
    """
    config = config or EvalConfig()
    gallery = _build_gallery(model, manifest, split)
    index = manifest.image_index()
    triplets = [t for t in manifest.triplets
                if t.reference_image_id in index and index[t.reference_image_id].split == split]
    if not triplets:
        raise EvaluationError(f"Sin tripletas de evaluación en la split '{split.value}'")

    def run_query(trip):
        if trip.target_image_id not in gallery.position:
            raise EvaluationError(
                f"Objetivo '{trip.target_image_id}' ausente de la galería", triplet_id=trip.triplet_id
            )
        ref = index[trip.reference_image_id]
        query = _checked(model.compose(model.image_embed(ref, manifest.root),
                                       model.text_embed(trip.modification_text)),
                         f"consulta '{trip.triplet_id}'", trip.triplet_id)
        exclude = trip.reference_image_id if config.exclude_reference else None
        rank, top = _target_rank(gallery, query, trip.target_image_id, exclude, config.top_n)
        return QueryRetrieval(trip.triplet_id, trip.reference_image_id, trip.modification_text,
                              trip.target_image_id, rank, top)

    workers = LIMITS.clamp_workers(config.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            retrievals = list(executor.map(run_query, triplets))
    else:
        retrievals = [run_query(trip) for trip in triplets]

    result = recall_at_k([r.target_rank for r in retrievals], config.ks)
    logger.info(f"Evaluación {split.value}: {result.num_queries} consultas, galería {len(gallery.ids)} → "
                + ", ".join(f"R@{k}={v:.2f}" for k, v in result.recall_at.items()))
    return EvalResult(
        recall_at=result.recall_at,
        num_queries=result.num_queries,
        retrievals=tuple(retrievals) if config.top_n > 0 else (),
    )


# ==================== TABLAS ====================

@dataclass(frozen=True)
class ResultsTable:
    text: str
    csv: str
    long_csv: str


def _check_ks(rows: Sequence[Tuple[str, EvalResult]]) -> Tuple[int, ...]:
    if not rows:
        return ()
    ks = rows[0][1].ks
    for label, result in rows[1:]:
        if result.ks != ks:
            raise ValueError(f"La fila '{label}' tiene ks {result.ks} distintos de {ks}")
    return ks


def csv_text(header: Sequence[str], records: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(records)
    return buffer.getvalue()


def render_results_table(rows: Sequence[Tuple[str, EvalResult]]) -> ResultsTable:
    """Tabla fija + CSV ancho (label, R@k…) + CSV largo (label, k, recall)."""
    ks = _check_ks(rows)
    headers = ["label"] + [f"R@{k}" for k in ks]
    label_width = max([len("label")] + [len(label) for label, _ in rows])
    col_width = max([6] + [len(h) for h in headers[1:]])

    lines = ["  ".join([headers[0].ljust(label_width)] + [h.rjust(col_width) for h in headers[1:]])]
    lines.append("-" * len(lines[0]))
    for label, result in rows:
        cells = [f"{result.recall_at[k]:.2f}".rjust(col_width) for k in ks]
        lines.append("  ".join([label.ljust(label_width)] + cells))

    wide = csv_text(headers, [[label] + [f"{result.recall_at[k]:.2f}" for k in ks] for label, result in rows])
    long = csv_text(["label", "k", "recall"],
                     [[label, k, f"{result.recall_at[k]:.2f}"] for label, result in rows for k in ks])
    return ResultsTable(text="\n".join(lines) + "\n", csv=wide, long_csv=long)


def render_comparison(baseline: Tuple[str, EvalResult], improved: Tuple[str, EvalResult]) -> str:
    """Dos filas y la fila de diferencias; '*' marca cada k que mejora."""
    ks = _check_ks([baseline, improved])
    (base_label, base), (new_label, new) = baseline, improved
    label_width = max(len(base_label), len(new_label), len("delta"))
    col_width = max([7] + [len(f"R@{k}") for k in ks])

    def row(label, cells):
        return "  ".join([label.ljust(label_width)] + [c.rjust(col_width) for c in cells])

    lines = [row("label", [f"R@{k}" for k in ks])]
    lines.append("-" * len(lines[0]))
    lines.append(row(base_label, [f"{base.recall_at[k]:.2f}" for k in ks]))
    lines.append(row(new_label, [
        f"{new.recall_at[k]:.2f}" + ("*" if new.recall_at[k] > base.recall_at[k] else "") for k in ks
    ]))
    lines.append(row("delta", [f"{new.recall_at[k] - base.recall_at[k]:+.2f}" for k in ks]))
    return "\n".join(lines) + "\n"
