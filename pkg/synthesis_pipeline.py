#!/usr/bin/env python3
"""
Synthesis Pipeline - Síntesis de tripletas contrafactuales reanudable
====================================================================
caption → perturbación → generación → ensamblado, con:
- Referencias en round-robin con reutilización (n puede superar |pool|)
- Semilla por ítem = hash(semilla de corrida, imagen, intento)
- Deduplicación (imagen, componente, valor) dentro de la corrida
- Presupuesto de reintentos por imagen e informe de déficit
- Artefactos por etapa (captions, plan de ediciones, progreso) para reanudar

Versión: 1.0.0
"""

import hashlib
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from artifact_store import CAPTIONS_FILE, EDITS_FILE, PROGRESS_FILE, ArtifactStore
from caption_perturber import (
    EditRegistry, PerturberBackend, available_kinds, perturb_caption, sample_kind,
)
from captioner import CaptionerBackend, caption_images
from counterfactual_generator import (
    GenerationConfig, GenerationSkip, GeneratorBackend, SyntheticMediaWriter, generate_target,
)
from dataset_io import rebase_record
from forge_errors import (
    BackendUnavailableError, EditParseError, EditValidationError, GenerationError, StageError,
    SynthesisAborted, UnperturbableError,
)
from forge_limits import LIMITS
from toy_world import DEFAULT_TEMPLATE, ToyVocabulary
from triplet_core import (
    Caption, CaptionEdit, DatasetManifest, ImageRecord, Triplet, caption_from_dict, caption_to_dict,
    edit_from_dict, edit_to_dict, image_from_dict, image_to_dict, save_manifest, triplet_from_dict,
    triplet_to_dict, validate_manifest,
)

logger = logging.getLogger(__name__)

SYNTHETIC_MANIFEST_FILE = "synthetic_manifest.json"


@dataclass(frozen=True)
class SynthesisBackends:
    captioner: CaptionerBackend
    perturber: PerturberBackend
    generator: GeneratorBackend

    @classmethod
    def toy(cls, template: str = DEFAULT_TEMPLATE, vocabulary: Optional[ToyVocabulary] = None,
            kind_weights=None) -> "SynthesisBackends":
        return cls(
            captioner=CaptionerBackend.toy(template),
            perturber=PerturberBackend.rule_based(vocabulary, kind_weights),
            generator=GeneratorBackend.toy(vocabulary),
        )

    def describe(self) -> Dict[str, Optional[str]]:
        return {
            "captioner": self.captioner.kind.value,
            "captioner_endpoint": self.captioner.endpoint,
            "perturber": self.perturber.kind.value,
            "perturber_endpoint": self.perturber.endpoint,
            "generator": self.generator.kind.value,
            "generator_endpoint": self.generator.endpoint,
        }


@dataclass(frozen=True)
class SynthesisConfig:
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    workers: int = LIMITS.DEFAULT_WORKERS
    retry_budget: int = LIMITS.RETRY_BUDGET_PER_IMAGE
    run_name: str = "forge"
    show_progress: bool = False


@dataclass(frozen=True)
class ShortfallReport:
    """Déficit explícito cuando los presupuestos se agotan antes de n."""
    requested: int
    achieved: int
    exhausted_references: int
    failures: Dict[str, int]

    def to_dict(self) -> dict:
        return {
            "requested": self.requested,
            "achieved": self.achieved,
            "missing": self.requested - self.achieved,
            "exhausted_references": self.exhausted_references,
            "failures": dict(self.failures),
        }


@dataclass(frozen=True)
class SynthesisResult:
    manifest: DatasetManifest
    shortfall: Optional[ShortfallReport] = None

    @property
    def complete(self) -> bool:
        return self.shortfall is None


@dataclass(frozen=True)
class PlannedEdit:
    plan_index: int
    reference: ImageRecord
    attempt: int
    seed: int
    edit: Optional[CaptionEdit]
    failure: Optional[str] = None


def derive_item_seed(run_seed: int, image_id: str, attempt: int) -> int:
    """Semilla estable ante reordenación y paralelismo."""
    digest = hashlib.sha256(f"{int(run_seed)}|{image_id}|{int(attempt)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 31)


def select_source_images(pool: DatasetManifest, count: int, seed: int) -> DatasetManifest:
    """Muestra uniforme sembrada de `count` imágenes del pool (sin tripletas)."""
    ids = sorted(img.image_id for img in pool.images)
    if count >= len(ids):
        chosen = set(ids)
    else:
        permutation = np.random.default_rng(seed).permutation(len(ids))
        chosen = {ids[i] for i in permutation[:count]}
    images = [img for img in pool.images if img.image_id in chosen]
    logger.info(f"Imágenes fuente: {len(images)} de {len(pool.images)}")
    return pool.with_contents(images=images, triplets=())


class SynthesisRun:
    """
    Estado de una corrida de síntesis sobre un directorio de salida.

    Todas las decisiones (referencia, componente, valor, id de destino) se
    toman secuencialmente en orden de plan; solo la generación es paralela.
    """

    def __init__(self, pool: DatasetManifest, backends: SynthesisBackends,
                 config: Optional[SynthesisConfig] = None, seed: int = 0, out_dir="synthesis"):
        self.pool = pool
        self.backends = backends
        self.config = config or SynthesisConfig()
        self.config.generation.validate()
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        self.store = ArtifactStore(self.out_dir / "checkpoint")
        self.writer = SyntheticMediaWriter(self.out_dir, prefix=self.config.run_name)
        self.registry = EditRegistry()
        self.captions: Dict[str, Caption] = {}

        self._references = list(pool.images)
        self._attempts = Counter()
        self._failures = Counter()
        self._failure_reasons = Counter()
        self._retired = set()
        self._cursor = 0
        self._plan_index = 0
        self._results: Dict[int, Tuple[ImageRecord, Triplet]] = {}
        self._cached_edits = self.store.index(EDITS_FILE, "plan_index")
        self._cached_progress = self.store.index(PROGRESS_FILE, "plan_index")

    # ---------- etapa 1: captions ----------

    def caption(self) -> Dict[str, Caption]:
        """Captions del pool, reutilizando los ya persistidos."""
        cached = {rec["image_id"]: caption_from_dict(rec) for rec in self.store.records(CAPTIONS_FILE)}
        pool_ids = [img.image_id for img in self.pool.images]
        missing = [image_id for image_id in pool_ids if image_id not in cached]
        if missing:
            logger.info(f"Captioning de {len(missing)} imágenes ({len(cached)} en caché)")
            try:
                fresh = caption_images(
                    self.pool, self.backends.captioner, missing, workers=self.config.workers,
                    on_caption=lambda c: self.store.append(CAPTIONS_FILE, caption_to_dict(c)),
                )
            except BackendUnavailableError as e:
                raise SynthesisAborted(f"Captioner no disponible: {e}", str(self.store.root), 0) from e
            cached.update(fresh)
        self.captions = {image_id: cached[image_id] for image_id in pool_ids}
        return self.captions

    # ---------- etapa 2: plan de ediciones ----------

    def _retire_if_exhausted(self, image_id: str):
        if self._failures[image_id] >= self.config.retry_budget:
            self._retired.add(image_id)

    def _record_failure(self, image_id: str, reason: str):
        self._failures[image_id] += 1
        self._failure_reasons[reason] += 1
        self._retire_if_exhausted(image_id)

    def _draw(self, reference: ImageRecord) -> Optional[PlannedEdit]:
        """Una edición para la referencia; None si ya no admite ediciones nuevas."""
        image_id = reference.image_id
        caption = self.captions[image_id]
        attempt = self._attempts[image_id]
        plan_index = self._plan_index
        item_seed = derive_item_seed(self.seed, image_id, attempt)

        cached = self._cached_edits.get(plan_index)
        if cached and cached.get("reference") == image_id and cached.get("attempt") == attempt:
            edit = edit_from_dict(cached["edit"]) if cached.get("edit") else None
            failure = cached.get("failure")
        else:
            kinds = available_kinds(caption, self.backends.perturber, self.registry)
            if not kinds:
                self._retired.add(image_id)
                return None
            edit, failure = None, None
            try:
                kind = sample_kind(self.backends.perturber.kind_weights, np.random.default_rng(item_seed), kinds)
                used = self.registry.used(image_id, kind)
                edit = perturb_caption(caption, kind, item_seed, self.backends.perturber, exclude=used)
            except (UnperturbableError, EditParseError, EditValidationError) as e:
                failure = type(e).__name__
                logger.warning(f"Edición descartada para {image_id} (intento {attempt}): {e}")
            except BackendUnavailableError as e:
                raise SynthesisAborted(f"Perturbador no disponible: {e}", str(self.store.root),
                                       self.completed_count()) from e
            self.store.append(EDITS_FILE, {
                "plan_index": plan_index,
                "reference": image_id,
                "attempt": attempt,
                "seed": item_seed,
                "edit": edit_to_dict(edit) if edit else None,
                "failure": failure,
            })

        self._attempts[image_id] += 1
        self._plan_index += 1
        if edit is not None and not self.registry.claim(image_id, edit.kind, edit.new_value):
            edit, failure = None, "duplicate_edit"
        if edit is None:
            self._record_failure(image_id, failure or "edit_failed")
        return PlannedEdit(plan_index, reference, attempt, item_seed, edit, failure)

    def plan_round(self, needed: int) -> List[PlannedEdit]:
        """Hasta `needed` ediciones válidas en round-robin sobre las referencias activas."""
        plan: List[PlannedEdit] = []
        while len(plan) < needed and len(self._retired) < len(self._references):
            reference = self._references[self._cursor % len(self._references)]
            self._cursor += 1
            if reference.image_id in self._retired:
                continue
            drawn = self._draw(reference)
            if drawn is not None and drawn.edit is not None:
                plan.append(drawn)
        return plan

    # ---------- etapa 3: generación ----------

    def _generate_one(self, planned: PlannedEdit):
        config = self.config.generation.with_seed(planned.seed)
        return generate_target(
            planned.reference, planned.edit, config, self.backends.generator, self.writer,
            root=self.pool.root,
            image_id=self.writer.image_id_for(planned.plan_index),
            triplet_id=f"{self.config.run_name}-syn-{planned.plan_index:06d}",
        )

    def _restore(self, record: dict):
        if record.get("status") == "ok":
            return image_from_dict(record["image"]), triplet_from_dict(record["triplet"])
        return record.get("reason", "generation_failed")

    def generate_round(self, plan: List[PlannedEdit], progress=None) -> Dict[int, object]:
        """
        Genera los objetivos del plan. Devuelve plan_index → (imagen, tripleta)
        o el motivo del fallo.

        Raises:
            SynthesisAborted: el generador dejó de responder (progreso persistido)
        """
        outcomes: Dict[int, object] = {}
        pending = []
        for planned in plan:
            cached = self._cached_progress.get(planned.plan_index)
            if cached and cached.get("reference") == planned.reference.image_id:
                outcomes[planned.plan_index] = self._restore(cached)
                if progress is not None and isinstance(outcomes[planned.plan_index], tuple):
                    progress.update(1)
            else:
                pending.append(planned)

        outage: Optional[BaseException] = None
        with ThreadPoolExecutor(max_workers=LIMITS.clamp_workers(self.config.workers)) as executor:
            futures = {executor.submit(self._generate_one, planned): planned for planned in pending}
            for future in as_completed(futures):
                planned = futures[future]
                record = {"plan_index": planned.plan_index, "reference": planned.reference.image_id}
                try:
                    result = future.result()
                except BackendUnavailableError as e:
                    outage = e
                    continue
                except (GenerationError, EditValidationError) as e:
                    logger.warning(f"Generación fallida para {planned.reference.image_id}: {e}")
                    record.update(status="failed", reason=type(e).__name__)
                    outcome = record["reason"]
                else:
                    if isinstance(result, GenerationSkip):
                        record.update(status="skipped", reason=result.reason)
                        outcome = result.reason
                    else:
                        image, triplet = result
                        record.update(status="ok", image=image_to_dict(image), triplet=triplet_to_dict(triplet))
                        outcome = (image, triplet)
                        if progress is not None:
                            progress.update(1)
                self.store.append(PROGRESS_FILE, record)
                outcomes[planned.plan_index] = outcome

        if outage is not None:
            done = self.completed_count() + sum(1 for o in outcomes.values() if isinstance(o, tuple))
            raise SynthesisAborted(f"Generador no disponible: {outage}", str(self.store.root), done) from outage
        return outcomes

    # ---------- orquestación ----------

    def completed_count(self) -> int:
        return len(self._results)

    def _clean_orphans(self):
        keep = set()
        for record in self._cached_progress.values():
            if record.get("status") == "ok":
                image = record["image"]
                keep.add(Path(image["uri"]).name)
                if image.get("sidecar"):
                    keep.add(Path(image["sidecar"]).name)
        self.store.remove_untracked(self.out_dir / self.writer.subdir, keep)

    def run(self, n: int, progress_callback: Optional[Callable[[int, int], None]] = None) -> SynthesisResult:
        name = f"{self.config.run_name}-synthetic"
        if n < 0:
            raise ValueError(f"n debe ser ≥ 0: {n}")
        if n == 0:
            return SynthesisResult(DatasetManifest(name=name, root=str(self.out_dir)))
        if not self.pool.images:
            raise ValueError("El pool de imágenes fuente está vacío")

        self._clean_orphans()
        if not self.captions:
            self.caption()

        self._results = {}
        with tqdm(total=n, desc="Síntesis", unit="tripleta", disable=not self.config.show_progress) as bar:
            while len(self._results) < n:
                plan = self.plan_round(n - len(self._results))
                if not plan:
                    break
                outcomes = self.generate_round(plan, progress=bar)
                for planned in plan:
                    outcome = outcomes[planned.plan_index]
                    if isinstance(outcome, tuple):
                        self._results[planned.plan_index] = outcome
                    else:
                        self._record_failure(planned.reference.image_id, outcome)
                if progress_callback:
                    progress_callback(len(self._results), n)

        manifest = self._assemble(name)
        shortfall = None
        if len(self._results) < n:
            shortfall = ShortfallReport(
                requested=n,
                achieved=len(self._results),
                exhausted_references=len(self._retired),
                failures=dict(sorted(self._failure_reasons.items())),
            )
            logger.warning(f"Déficit de síntesis: {shortfall.achieved}/{n} tripletas")
        logger.info(f"Síntesis completada: {len(manifest.triplets)} tripletas, "
                    f"{len(manifest.images)} imágenes en el manifiesto")
        return SynthesisResult(manifest=manifest, shortfall=shortfall)

    def _assemble(self, name: str) -> DatasetManifest:
        pool_index = self.pool.image_index()
        references: Dict[str, ImageRecord] = {}
        images: List[ImageRecord] = []
        triplets: List[Triplet] = []
        for plan_index in sorted(self._results):
            image, triplet = self._results[plan_index]
            ref_id = triplet.reference_image_id
            if ref_id not in references:
                references[ref_id] = rebase_record(pool_index[ref_id], self.pool.root, str(self.out_dir))
            images.append(image)
            triplets.append(triplet)

        manifest = DatasetManifest(
            name=name, root=str(self.out_dir),
            images=tuple(references.values()) + tuple(images), triplets=tuple(triplets),
        )
        violations = validate_manifest(manifest)
        if violations:
            first = violations[0]
            raise StageError("assemble", ValueError(f"{len(violations)} violaciones, p. ej. {first.code}"),
                             item_id=first.subject_id)
        save_manifest(manifest, self.out_dir / SYNTHETIC_MANIFEST_FILE)
        return manifest


def synthesize_triplets(pool: DatasetManifest, n: int, backends: SynthesisBackends,
                        config: Optional[SynthesisConfig] = None, seed: int = 0, out_dir="synthesis",
                        progress_callback: Optional[Callable[[int, int], None]] = None) -> SynthesisResult:
    """
    Sintetiza n tripletas contrafactuales a partir del pool.

    El manifiesto resultante contiene las imágenes de referencia usadas y
    las imágenes sintéticas; una segunda llamada sobre el mismo out_dir
    reanuda desde los artefactos persistidos.

    Raises:
        SynthesisAborted: caída de un backend externo (checkpoint persistido)
    """
    return SynthesisRun(pool, backends, config, seed, out_dir).run(n, progress_callback)
