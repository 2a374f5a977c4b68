#!/usr/bin/env python3
"""
Ablation Harness - Recall frente a la fracción de datos originales
==================================================================
Para cada fracción de imágenes originales y cada brazo (solo originales,
originales + sintéticas, opcionalmente + minadas): submuestrea, fusiona,
entrena y evalúa. Emite el CSV (fraction, arm, k, recall).

Versión: 1.0.0
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from dataset_io import merge, subsample_count, subsample_images, subsample_order
from forge_errors import StageError
from forge_limits import LIMITS
from retrieval_eval import CIRModel, EvalConfig, EvalResult, csv_text, evaluate
from triplet_core import DatasetManifest, Split, split_manifest

logger = logging.getLogger(__name__)

ARM_ORIGINAL = "original"
ARM_SYNTHETIC = "synthetic"
ARM_MINED = "mined"

TrainFn = Callable[[DatasetManifest, int], CIRModel]


@dataclass(frozen=True)
class AblationRow:
    fraction: float
    arm: str
    k: int
    recall: float


@dataclass
class AblationTable:
    rows: List[AblationRow] = field(default_factory=list)
    results: Dict[Tuple[float, str], EvalResult] = field(default_factory=dict)
    kept_images: Dict[float, int] = field(default_factory=dict)
    train_triplets: Dict[Tuple[float, str], int] = field(default_factory=dict)
    prefix_nested: bool = True

    def to_csv(self) -> str:
        return csv_text(
            ["fraction", "arm", "k", "recall"],
            [[f"{r.fraction:g}", r.arm, r.k, f"{r.recall:.2f}"] for r in self.rows],
        )

    def recall(self, fraction: float, arm: str, k: int) -> float:
        return self.results[(fraction, arm)].recall_at[k]

    def render_text(self) -> str:
        if not self.rows:
            return ""
        ks = sorted({r.k for r in self.rows})
        arms = list(dict.fromkeys(r.arm for r in self.rows))
        header = f"{'fraction':>8}  {'arm':<10}  {'triplets':>8}  " + "  ".join(f"{f'R@{k}':>7}" for k in ks)
        lines = [header, "-" * len(header)]
        for fraction in sorted(self.kept_images):
            for arm in arms:
                if (fraction, arm) not in self.results:
                    continue
                cells = "  ".join(f"{self.recall(fraction, arm, k):>7.2f}" for k in ks)
                count = self.train_triplets.get((fraction, arm), 0)
                lines.append(f"{fraction:>8g}  {arm:<10}  {count:>8}  {cells}")
        return "\n".join(lines) + "\n"


def verify_nested_prefixes(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> bool:
    """Los conjuntos conservados crecen con la fracción (misma permutación)."""
    order = subsample_order(manifest, seed)
    kept = [set(order[:subsample_count(len(order), f)]) for f in sorted(fractions)]
    return all(a <= b for a, b in zip(kept, kept[1:]))


def run_ablation(manifest: DatasetManifest, fractions: Sequence[float], synthetic: DatasetManifest,
                 train_fn: TrainFn, config: Optional[EvalConfig] = None, seed: int = 0,
                 eval_manifest: Optional[DatasetManifest] = None, eval_split: Split = Split.TEST,
                 extra_arms: Optional[Mapping[str, DatasetManifest]] = None,
                 workers: int = 1,
                 progress_callback: Optional[Callable[[int, int], None]] = None) -> AblationTable:
    """
    Ejecuta la rejilla fracción × brazo.

    Las imágenes originales de entrenamiento se submuestrean con una única
    permutación sembrada; la split de evaluación se usa completa.

    Raises:
        ValueError: fracción fuera de (0, 1]
        StageError: fallo de entrenamiento o evaluación con contexto (fracción, brazo)
    """
    config = config or EvalConfig()
    fractions = list(fractions)
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"Fracción fuera de (0, 1]: {fraction}")

    originals = split_manifest(manifest, Split.TRAIN)
    eval_manifest = eval_manifest or manifest
    arms: Dict[str, Optional[DatasetManifest]] = {ARM_ORIGINAL: None, ARM_SYNTHETIC: synthetic}
    arms.update(extra_arms or {})

    table = AblationTable(prefix_nested=verify_nested_prefixes(originals, fractions, seed))
    if not table.prefix_nested:
        raise StageError("ablation", RuntimeError("Los submuestreos no forman prefijos anidados"))

    jobs = []
    for fraction in fractions:
        reduced = subsample_images(originals, fraction, seed)
        table.kept_images[fraction] = len(reduced.images)
        for arm, extra in arms.items():
            jobs.append((fraction, arm, reduced if extra is None else merge(reduced, extra)))

    def run_job(job) -> Tuple[float, str, int, EvalResult]:
        fraction, arm, train_manifest = job
        logger.info(f"Ablación f={fraction:g} brazo={arm}: {len(train_manifest.triplets)} tripletas")
        try:
            model = train_fn(train_manifest, seed)
            result = evaluate(model, eval_manifest, eval_split, config)
        except Exception as e:
            raise StageError("ablation", e, item_id=f"fraction={fraction:g},arm={arm}") from e
        return fraction, arm, len(train_manifest.triplets), result

    # Secuencial por defecto: el orden de entrenamiento fija los resultados
    if workers > 1:
        with ThreadPoolExecutor(max_workers=LIMITS.clamp_workers(workers)) as executor:
            outcomes = list(executor.map(run_job, jobs))
    else:
        outcomes = []
        for done, job in enumerate(jobs, start=1):
            outcomes.append(run_job(job))
            if progress_callback:
                progress_callback(done, len(jobs))

    for fraction, arm, n_triplets, result in outcomes:
        table.results[(fraction, arm)] = result
        table.train_triplets[(fraction, arm)] = n_triplets
        for k, recall in result.recall_at.items():
            table.rows.append(AblationRow(fraction, arm, k, recall))

    logger.info(f"Ablación completada: {len(jobs)} entrenamientos")
    return table
