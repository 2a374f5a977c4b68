#!/usr/bin/env python3
"""
Experiment Runner - Corrida completa configurada desde un archivo TOML
======================================================================
Etapas: dataset → subsample → synthesize → train → eval → ablation → report.

Cada corrida escribe un bundle en --out:
- manifests/*.json, source_images.json, synthesis/ (checkpoint reanudable)
- results.csv (label, k, recall), results_wide.csv, results.txt, comparison.txt
- ablation.csv (fraction, arm, k, recall), models/*.tcir, exports/
- run.log, summary.json, report.md, report.html

Versión: 1.0.0
"""

import hashlib
import json
import logging
import platform
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ablation_harness import ARM_MINED, ARM_ORIGINAL, ARM_SYNTHETIC, AblationTable, run_ablation
from artifact_store import read_json, write_json_atomic, write_text_atomic
from backend_client import endpoint_from_env
from caption_perturber import PROMPT_VERSION, PerturberBackend, PerturberKind
from captioner import CaptionerBackend, CaptionerKind
from counterfactual_generator import GenerationConfig, GeneratorBackend, GeneratorKind
from dataset_io import (
    CIRR_KS, FASHIONIQ_KS, export_cirr, export_fashioniq, load_cirr, load_fashioniq, merge,
    mine_caption_pairs, subsample_images,
)
from forge_errors import ConfigError, ForgeError, StageError
from forge_limits import LIMITS
from report_templates import REPORT_THEMES, render_report_html, render_report_markdown
from retrieval_eval import EvalConfig, EvalResult, evaluate, render_comparison, render_results_table
from synthesis_pipeline import (
    SynthesisBackends, SynthesisConfig, SynthesisRun, select_source_images,
)
from toy_cir_model import TrainConfig, make_train_fn, save_checkpoint
from toy_world import DEFAULT_TEMPLATE, build_toy_world
from triplet_core import (
    ComponentKind, DatasetManifest, Split, load_manifest, save_manifest, split_manifest,
)

logger = logging.getLogger(__name__)

FORGE_VERSION = "1.0.0"

STAGES = ("dataset", "subsample", "synthesize", "train", "eval", "ablation", "report")
DATASET_KINDS = ("toy", "cirr", "fashioniq")

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"


# ==================== CONFIGURACIÓN ====================

@dataclass(frozen=True)
class BackendsConfig:
    captioner: str = CaptionerKind.TOY.value
    captioner_endpoint: Optional[str] = None
    perturber: str = PerturberKind.RULE_BASED.value
    perturber_endpoint: Optional[str] = None
    generator: str = GeneratorKind.TOY.value
    generator_endpoint: Optional[str] = None
    template: str = DEFAULT_TEMPLATE
    kind_weights: Optional[Dict[str, float]] = None
    timeout: float = LIMITS.REQUEST_TIMEOUT_SECONDS
    max_retries: int = LIMITS.MAX_RETRIES
    max_in_flight: int = LIMITS.MAX_IN_FLIGHT_REQUESTS

    def build(self) -> SynthesisBackends:
        """
        Instancia los backends; los endpoints ausentes se toman del entorno.

        Raises:
            ConfigError: combinación tipo/endpoint inválida
        """
        client = {"timeout": self.timeout, "max_retries": self.max_retries,
                  "max_in_flight": self.max_in_flight}
        try:
            if self.captioner == CaptionerKind.TOY.value:
                captioner = CaptionerBackend.toy(self.template)
            else:
                captioner = CaptionerBackend(
                    kind=CaptionerKind(self.captioner),
                    endpoint=self.captioner_endpoint or endpoint_from_env("captioner"), **client,
                )
            weights = None
            if self.kind_weights is not None:
                weights = {ComponentKind(k): float(v) for k, v in self.kind_weights.items()}
            if self.perturber == PerturberKind.RULE_BASED.value:
                perturber = PerturberBackend.rule_based(kind_weights=weights)
            else:
                perturber = PerturberBackend.external(
                    self.perturber_endpoint or endpoint_from_env("perturber"), weights, **client,
                )
            if self.generator == GeneratorKind.TOY.value:
                generator = GeneratorBackend.toy()
            else:
                generator = GeneratorBackend(
                    kind=GeneratorKind(self.generator),
                    endpoint=self.generator_endpoint or endpoint_from_env("generator"), **client,
                )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Backend desconocido: {e}") from e
        return SynthesisBackends(captioner, perturber, generator)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "toy"
    name: Optional[str] = None
    # Toy world
    train_families: int = 300
    test_families: int = 100
    variants_per_family: int = 3
    raster_size: int = LIMITS.TOY_RASTER_SIZE
    # CIRR
    cirr_captions: List[str] = field(default_factory=list)
    cirr_splits: List[str] = field(default_factory=list)
    # FashionIQ
    fashioniq_captions: List[str] = field(default_factory=list)
    fashioniq_image_subdir: str = "images"
    fashioniq_extension: str = ".png"
    root: Optional[str] = None
    # Escenario con pocos datos
    fraction: float = 0.3
    source_images: int = LIMITS.SOURCE_IMAGES
    synthetic_triplets: Optional[int] = None
    synthetic_ratio: Optional[float] = None

    def synthetic_count(self, reduced_triplets: int) -> int:
        if self.synthetic_triplets is not None:
            return self.synthetic_triplets
        if self.synthetic_ratio is not None:
            return int(round(self.synthetic_ratio * reduced_triplets))
        return 0


@dataclass(frozen=True)
class EvalSettings:
    ks: Optional[List[int]] = None
    exclude_reference: Optional[bool] = None
    split: str = Split.TEST.value
    top_n: int = 10
    workers: int = 1

    def eval_config(self, dataset_kind: str) -> EvalConfig:
        """ks y exclude_reference por defecto según el protocolo del dataset."""
        fashion = dataset_kind == "fashioniq"
        ks = tuple(self.ks) if self.ks else (FASHIONIQ_KS if fashion else CIRR_KS)
        exclude = self.exclude_reference if self.exclude_reference is not None else not fashion
        return EvalConfig(ks=ks, exclude_reference=exclude, top_n=self.top_n, workers=self.workers)


@dataclass(frozen=True)
class AblationSettings:
    enabled: bool = False
    fractions: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.6, 1.0])
    include_mined: bool = False
    workers: int = 1


@dataclass(frozen=True)
class ReportSettings:
    theme: str = "light"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "forge"
    seed: int = 0
    out: str = "runs/forge"
    workers: int = LIMITS.DEFAULT_WORKERS
    stages: Tuple[str, ...] = STAGES
    include_mined: bool = False
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    report: ReportSettings = field(default_factory=ReportSettings)
    base_dir: str = "."

    def validate(self) -> "ExperimentConfig":
        """
        Raises:
            ConfigError: primer conjunto de problemas detectados
        """
        problems = []
        if not 0.0 < self.dataset.fraction <= 1.0:
            problems.append(f"dataset.fraction debe estar en (0, 1]: {self.dataset.fraction}")
        if self.dataset.kind not in DATASET_KINDS:
            problems.append(f"dataset.kind desconocido: {self.dataset.kind}")
        if self.dataset.source_images < 1:
            problems.append(f"dataset.source_images debe ser ≥ 1: {self.dataset.source_images}")
        if self.dataset.synthetic_triplets is not None and self.dataset.synthetic_triplets < 0:
            problems.append(f"dataset.synthetic_triplets negativo: {self.dataset.synthetic_triplets}")
        if self.dataset.synthetic_ratio is not None and self.dataset.synthetic_ratio < 0:
            problems.append(f"dataset.synthetic_ratio negativo: {self.dataset.synthetic_ratio}")
        if self.dataset.kind == "cirr" and len(self.dataset.cirr_captions) != len(self.dataset.cirr_splits):
            problems.append("dataset.cirr_captions y dataset.cirr_splits deben emparejarse")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            problems.append(f"Etapas desconocidas: {unknown}")
        if any(not 0.0 < f <= 1.0 for f in self.ablation.fractions):
            problems.append(f"ablation.fractions fuera de (0, 1]: {self.ablation.fractions}")
        try:
            Split(self.eval.split)
        except ValueError:
            problems.append(f"eval.split desconocida: {self.eval.split}")
        if self.report.theme not in REPORT_THEMES:
            problems.append(f"report.theme desconocido: {self.report.theme}")
        if problems:
            raise ConfigError("Configuración inválida: " + "; ".join(problems))

        self.generation.validate()
        self.train.validate()
        try:
            self.eval.eval_config(self.dataset.kind)
        except ValueError as e:
            raise ConfigError(f"Configuración de evaluación inválida: {e}") from e
        self.backends.build()
        return self

    def resolve(self, path: str) -> Path:
        """Rutas del archivo de configuración relativas a su directorio."""
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("base_dir")
        data["stages"] = list(self.stages)
        return data

    def fingerprint(self) -> str:
        data = self.to_dict()
        data.pop("out")
        canonical = json.dumps(data, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(cls, data: Optional[dict], section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Claves desconocidas en [{section}]: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Sección [{section}] inválida: {e}") from e


_SECTIONS = ("backends", "generation", "dataset", "train", "eval", "ablation", "report")


def parse_config(data: dict, base_dir=".", seed: Optional[int] = None,
                 out: Optional[str] = None) -> ExperimentConfig:
    """Configuración validada desde un dict TOML; seed/out sobreescriben el archivo."""
    experiment = dict(data.get("experiment", {}))
    if seed is not None:
        experiment["seed"] = int(seed)
    if out is not None:
        experiment["out"] = str(out)
    if "stages" in experiment:
        experiment["stages"] = tuple(experiment["stages"])

    train_data = dict(data.get("train", {}))
    train_data.setdefault("seed", experiment.get("seed", 0))
    generation_data = dict(data.get("generation", {}))
    generation_data.setdefault("seed", experiment.get("seed", 0))

    base = _section(ExperimentConfig, {k: v for k, v in experiment.items()}, "experiment")
    config = ExperimentConfig(
        **{f.name: getattr(base, f.name) for f in fields(ExperimentConfig)
           if f.name not in _SECTIONS + ("base_dir",)},
        backends=_section(BackendsConfig, data.get("backends"), "backends"),
        generation=_section(GenerationConfig, generation_data, "generation"),
        dataset=_section(DatasetConfig, data.get("dataset"), "dataset"),
        train=_section(TrainConfig, train_data, "train"),
        eval=_section(EvalSettings, data.get("eval"), "eval"),
        ablation=_section(AblationSettings, data.get("ablation"), "ablation"),
        report=_section(ReportSettings, data.get("report"), "report"),
        base_dir=str(base_dir),
    )
    return config.validate()


def load_config(config_file, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """
    Raises:
        ConfigError: TOML mal formado o valores inválidos
    """
    path = Path(config_file)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Archivo de configuración no encontrado: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML inválido en {path}: {e}") from e
    return parse_config(data, base_dir=path.parent, seed=seed, out=out)


# ==================== BUNDLE ====================

@dataclass
class ExperimentReport:
    out_dir: Path
    summary: Dict[str, Any]
    results: Dict[str, EvalResult] = field(default_factory=dict)
    ablation: Optional[AblationTable] = None
    reused: bool = False

    @property
    def completed(self) -> bool:
        return self.summary.get("status") == STATUS_COMPLETED


def _versions() -> Dict[str, str]:
    return {
        "forge": FORGE_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "prompt": PROMPT_VERSION,
    }


def _results_from_summary(summary: dict) -> Dict[str, EvalResult]:
    return {
        arm: EvalResult(recall_at={int(k): v for k, v in recalls.items()},
                        num_queries=summary.get("num_queries", {}).get(arm, 0))
        for arm, recalls in (summary.get("recalls") or {}).items()
    }


class ExperimentRun:
    """Estado de una corrida; cada etapa deja sus artefactos en el bundle."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = Path(config.out)
        self.backends = config.backends.build()
        self.summary: Dict[str, Any] = {
            "name": config.name,
            "status": STATUS_RUNNING,
            "seed": config.seed,
            "fingerprint": config.fingerprint(),
            "config": config.to_dict(),
            "backends": self.backends.describe(),
            "versions": _versions(),
            "stages_completed": [],
            "stats": {},
        }
        self.full: Optional[DatasetManifest] = None
        self.reduced: Optional[DatasetManifest] = None
        self.synthetic: Optional[DatasetManifest] = None
        self.mined: Optional[DatasetManifest] = None
        self.models: Dict[str, Any] = {}
        self.results: Dict[str, EvalResult] = {}
        self.ablation: Optional[AblationTable] = None
        self._texts: Dict[str, str] = {}

    # ---------- utilidades ----------

    def _save(self, manifest: DatasetManifest, label: str):
        save_manifest(manifest, self.out_dir / "manifests" / f"{label}.json")
        if manifest.images or not manifest.triplets:
            self.summary["stats"][label] = manifest.stats.as_dict()

    def _write_summary(self):
        write_json_atomic(self.out_dir / "summary.json", self.summary)

    def _enabled(self, stage: str) -> bool:
        return stage in self.config.stages

    def _arms(self) -> Dict[str, DatasetManifest]:
        arms = {ARM_ORIGINAL: self.reduced}
        if self.synthetic is not None:
            arms[ARM_SYNTHETIC] = merge(self.reduced, self.synthetic)
        if self.mined is not None:
            arms[ARM_MINED] = merge(self.reduced, self.mined)
        return arms

    # ---------- etapas ----------

    def stage_dataset(self):
        cfg = self.config.dataset
        name = cfg.name or self.config.name
        if cfg.kind == "toy":
            cached = self.out_dir / "dataset" / "manifest.json"
            if cached.exists():
                self.full = load_manifest(cached)
            else:
                self.full = build_toy_world(
                    self.out_dir / "dataset", name=name, train_families=cfg.train_families,
                    test_families=cfg.test_families, variants_per_family=cfg.variants_per_family,
                    seed=self.config.seed, size=cfg.raster_size,
                )
                save_manifest(self.full, cached)
        elif cfg.kind == "cirr":
            root = self.config.resolve(cfg.root or ".")
            parts = [
                load_cirr(self.config.resolve(captions), self.config.resolve(split_file), root, name=name)
                for captions, split_file in zip(cfg.cirr_captions, cfg.cirr_splits)
            ]
            self.full = parts[0]
            for part in parts[1:]:
                self.full = merge(self.full, part)
        else:
            root = self.config.resolve(cfg.root or ".")
            self.full = load_fashioniq(
                [self.config.resolve(p) for p in cfg.fashioniq_captions], root,
                image_subdir=cfg.fashioniq_image_subdir, extension=cfg.fashioniq_extension, name=name,
            )
        self._save(self.full, "original")

    def stage_subsample(self):
        originals = split_manifest(self.full, Split.TRAIN)
        self.reduced = subsample_images(originals, self.config.dataset.fraction, self.config.seed)
        self._save(self.reduced, "reduced")

    def stage_synthesize(self):
        cfg = self.config.dataset
        pool = select_source_images(self.reduced, cfg.source_images, self.config.seed)
        write_json_atomic(self.out_dir / "source_images.json",
                          sorted(img.image_id for img in pool.images))
        run = SynthesisRun(
            pool, self.backends,
            SynthesisConfig(generation=self.config.generation, workers=self.config.workers,
                            run_name=self.config.name, show_progress=sys.stderr.isatty()),
            seed=self.config.seed, out_dir=self.out_dir / "synthesis",
        )
        n = cfg.synthetic_count(len(self.reduced.triplets))
        logger.info(f"Síntesis solicitada: {n} tripletas desde {len(pool.images)} imágenes fuente")

        if n > 0 or self.config.include_mined or self.config.ablation.include_mined:
            run.caption()
        result = run.run(n)
        self.synthetic = result.manifest
        self._save(self.synthetic, "synthetic")
        if result.shortfall is not None:
            self.summary["shortfall"] = result.shortfall.to_dict()

        if self.config.include_mined or self.config.ablation.include_mined:
            self.mined = mine_caption_pairs(self.reduced, run.captions)
            self._save(self.mined, "mined")

        exports = self.out_dir / "exports"
        combined = merge(self.reduced, self.synthetic)
        if cfg.kind == "fashioniq":
            export_fashioniq(combined, exports / "fashioniq", Split.TRAIN)
        else:
            export_cirr(combined, exports / "cirr", Split.TRAIN)

    def stage_train(self):
        train_fn = make_train_fn(self.config.train)
        for arm, manifest in self._arms().items():
            if arm == ARM_MINED and not self.config.include_mined:
                continue
            try:
                model = train_fn(manifest, self.config.train.seed)
            except ForgeError as e:
                raise StageError("train", e, item_id=f"arm={arm}") from e
            self.models[arm] = model
            save_checkpoint(model, self.out_dir / "models" / f"{arm}.tcir")
            self.summary["stats"][f"train_{arm}"] = manifest.stats.as_dict()

    def stage_eval(self):
        config = self.config.eval.eval_config(self.config.dataset.kind)
        split = Split(self.config.eval.split)
        retrieval_lines = []
        for arm, model in self.models.items():
            result = evaluate(model, self.full, split, config)
            self.results[arm] = result
            retrieval_lines += [json.dumps({"arm": arm, **r.to_dict()}, ensure_ascii=False)
                                for r in result.retrievals]

        rows = [(arm, result) for arm, result in self.results.items()]
        table = render_results_table(rows)
        write_text_atomic(self.out_dir / "results.csv", table.long_csv)
        write_text_atomic(self.out_dir / "results_wide.csv", table.csv)
        write_text_atomic(self.out_dir / "results.txt", table.text)
        write_text_atomic(self.out_dir / "retrievals.jsonl",
                          "".join(line + "\n" for line in retrieval_lines))
        self._texts["results"] = table.text
        if ARM_ORIGINAL in self.results and ARM_SYNTHETIC in self.results:
            comparison = render_comparison((ARM_ORIGINAL, self.results[ARM_ORIGINAL]),
                                           (ARM_SYNTHETIC, self.results[ARM_SYNTHETIC]))
            write_text_atomic(self.out_dir / "comparison.txt", comparison)
            self._texts["comparison"] = comparison

        self.summary["recalls"] = {arm: {str(k): v for k, v in r.recall_at.items()}
                                   for arm, r in self.results.items()}
        self.summary["num_queries"] = {arm: r.num_queries for arm, r in self.results.items()}

    def stage_ablation(self):
        if not self.config.ablation.enabled:
            logger.info("Ablación deshabilitada en la configuración")
            return
        extra = {ARM_MINED: self.mined} if self.config.ablation.include_mined and self.mined else None
        self.ablation = run_ablation(
            split_manifest(self.full, Split.TRAIN), self.config.ablation.fractions,
            self.synthetic or DatasetManifest(name="empty", root=str(self.out_dir)),
            make_train_fn(self.config.train),
            config=self.config.eval.eval_config(self.config.dataset.kind),
            seed=self.config.seed, eval_manifest=self.full, eval_split=Split(self.config.eval.split),
            extra_arms=extra, workers=self.config.ablation.workers,
        )
        write_text_atomic(self.out_dir / "ablation.csv", self.ablation.to_csv())
        write_text_atomic(self.out_dir / "ablation.txt", self.ablation.render_text())
        self._texts["ablation"] = self.ablation.render_text()

    def stage_report(self):
        body = render_report_markdown(
            {**self.summary, "status": STATUS_COMPLETED},
            self._texts.get("results", ""), self._texts.get("comparison", ""), self._texts.get("ablation", ""),
        )
        write_text_atomic(self.out_dir / "report.md", body)
        write_text_atomic(self.out_dir / "report.html", render_report_html(
            body, title=f"Informe {self.config.name}", theme=self.config.report.theme,
            subtitle=f"semilla {self.config.seed}",
        ))

    # ---------- orquestación ----------

    def _item_id(self, error: BaseException) -> Optional[str]:
        for attr in ("item_id", "triplet_id", "record_index", "checkpoint_dir"):
            value = getattr(error, attr, None)
            if value is not None:
                return str(value)
        return None

    def execute(self) -> ExperimentReport:
        stage_methods = {
            "dataset": self.stage_dataset,
            "subsample": self.stage_subsample,
            "synthesize": self.stage_synthesize,
            "train": self.stage_train,
            "eval": self.stage_eval,
            "ablation": self.stage_ablation,
            "report": self.stage_report,
        }
        required = {"subsample": "dataset", "synthesize": "subsample", "train": "subsample",
                    "eval": "train", "ablation": "dataset"}
        self._write_summary()

        for stage in STAGES:
            if not self._enabled(stage):
                continue
            dependency = required.get(stage)
            if dependency and not self._enabled(dependency):
                raise ConfigError(f"La etapa '{stage}' requiere '{dependency}'")
            logger.info(f"=== Etapa {stage} ===")
            try:
                stage_methods[stage]()
            except Exception as e:
                stage_error = e if isinstance(e, StageError) else StageError(stage, e, self._item_id(e))
                self.summary["status"] = STATUS_FAILED
                self.summary["failure"] = {
                    "stage": stage_error.stage,
                    "item_id": stage_error.item_id,
                    "cause": f"{type(stage_error.cause).__name__}: {stage_error.cause}",
                }
                self._write_summary()
                logger.error(f"Corrida fallida: {stage_error}")
                if stage_error is e:
                    raise
                raise stage_error from e
            self.summary["stages_completed"].append(stage)
            self._write_summary()

        self.summary["status"] = STATUS_COMPLETED
        self._write_summary()
        logger.info(f"Corrida completada: {self.out_dir}")
        return ExperimentReport(self.out_dir, self.summary, self.results, self.ablation)


def run_experiment(config_file, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentReport:
    """
    Ejecuta las etapas configuradas y escribe el bundle.

    Volver a ejecutar sobre un bundle completado con la misma configuración
    no hace nada (devuelve el resumen existente).

    Raises:
        ConfigError: configuración inválida (antes de escribir nada)
        StageError: fallo de una etapa; summary.json queda marcado como failed
    """
    config = load_config(config_file, seed=seed, out=out)
    return run_configured(config)


def run_configured(config: ExperimentConfig) -> ExperimentReport:
    out_dir = Path(config.out)
    previous = read_json(out_dir / "summary.json")
    if (previous and previous.get("status") == STATUS_COMPLETED
            and previous.get("fingerprint") == config.fingerprint()):
        logger.info(f"Bundle ya completado en {out_dir}; nada que hacer")
        return ExperimentReport(out_dir, previous, _results_from_summary(previous), reused=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    root_logger = logging.getLogger()
    root_logger.addHandler(handler)
    if root_logger.level > logging.INFO or root_logger.level == logging.NOTSET:
        root_logger.setLevel(logging.INFO)
    try:
        run = ExperimentRun(config)
        logger.info(f"Corrida '{config.name}' semilla={config.seed} → {out_dir}")
        logger.info(f"Backends: {run.summary['backends']}")
        logger.info(f"Versiones: {run.summary['versions']}")
        logger.info(f"Semillas: experimento={config.seed} generación={config.generation.seed} "
                    f"entrenamiento={config.train.seed}")
        logger.debug(str(LIMITS))
        return run.execute()
    finally:
        root_logger.removeHandler(handler)
        handler.close()
