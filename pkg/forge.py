#!/usr/bin/env python3
"""
Forge - CLI del forjador de tripletas contrafactuales
=====================================================
Subcomandos:
    forge toy       Construye un mundo de juguete (dataset estilo CIRR)
    forge caption   Captions de las imágenes de un manifiesto
    forge perturb   Ediciones de caption (una por caption)
    forge generate  Imágenes objetivo a partir de un archivo de ediciones
    forge synth     Síntesis completa de n tripletas
    forge stats     Estadísticas y validación de un manifiesto
    forge train     Entrena el modelo CIR de juguete
    forge eval      Recall@k de un checkpoint
    forge ablate    Rejilla fracción × brazo
    forge run       Experimento completo desde un archivo TOML

Opciones comunes: --config <archivo> --seed <int> --out <dir>.
El código de salida es 0 solo si la operación termina sin errores.

Versión: 1.0.0
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

load_dotenv(override=True)
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('forge')

from ablation_harness import run_ablation  # noqa: E402
from caption_perturber import available_kinds, perturb_caption, sample_kind  # noqa: E402
from captioner import caption_images  # noqa: E402
from counterfactual_generator import GenerationSkip, SyntheticMediaWriter, generate_target  # noqa: E402
from dataset_io import rebase_record  # noqa: E402
from experiment_runner import ExperimentConfig, load_config, run_configured  # noqa: E402
from forge_errors import ConfigError, ForgeError, SynthesisAborted  # noqa: E402
from retrieval_eval import evaluate, render_results_table  # noqa: E402
from synthesis_pipeline import (  # noqa: E402
    SynthesisConfig, derive_item_seed, select_source_images, synthesize_triplets,
)
from toy_cir_model import load_checkpoint, make_train_fn, save_checkpoint  # noqa: E402
from toy_world import build_toy_world  # noqa: E402
from triplet_core import (  # noqa: E402
    DatasetManifest, Split, caption_from_dict, caption_to_dict, edit_from_dict, edit_to_dict,
    load_manifest, save_manifest, split_manifest, validate_manifest,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _config(args) -> ExperimentConfig:
    """Configuración del archivo o por defecto (backends de juguete)."""
    if args.config:
        return load_config(args.config, seed=args.seed, out=args.out)
    return ExperimentConfig(
        seed=args.seed if args.seed is not None else 0,
        out=args.out or ExperimentConfig.out,
    ).validate()


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_jsonl(path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _write_jsonl(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return path


# ==================== SUBCOMANDOS ====================

def cmd_toy(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    cfg = config.dataset
    manifest = build_toy_world(out, name=cfg.name or config.name, train_families=cfg.train_families,
                               test_families=cfg.test_families,
                               variants_per_family=cfg.variants_per_family,
                               seed=config.seed, size=cfg.raster_size)
    save_manifest(manifest, out / "manifest.json")
    print(json.dumps(manifest.stats.as_dict(), indent=2))
    return EXIT_OK


def cmd_caption(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    manifest = load_manifest(args.manifest)
    backends = config.backends.build()
    captions = caption_images(manifest, backends.captioner, workers=config.workers)
    path = _write_jsonl(out / "captions.jsonl", (caption_to_dict(c) for c in captions.values()))
    print(f"{len(captions)} captions → {path}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    perturber = config.backends.build().perturber
    records = []
    for data in _read_jsonl(args.captions):
        caption = caption_from_dict(data)
        item_seed = derive_item_seed(config.seed, caption.image_id, 0)
        try:
            kinds = available_kinds(caption, perturber)
            kind = sample_kind(perturber.kind_weights, np.random.default_rng(item_seed), kinds)
            edit = perturb_caption(caption, kind, item_seed, perturber)
        except ForgeError as e:
            logger.warning(f"Sin edición para {caption.image_id}: {e}")
            continue
        records.append({"reference": caption.image_id, "seed": item_seed, "edit": edit_to_dict(edit)})
    path = _write_jsonl(out / "edits.jsonl", records)
    print(f"{len(records)} ediciones → {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    manifest = load_manifest(args.manifest)
    index = manifest.image_index()
    generator = config.backends.build().generator
    writer = SyntheticMediaWriter(out, prefix=config.name)

    references, images, triplets = {}, [], []
    skipped = 0
    for slot, record in enumerate(_read_jsonl(args.edits)):
        reference = index[record["reference"]]
        result = generate_target(
            reference, edit_from_dict(record["edit"]), config.generation.with_seed(record["seed"]),
            generator, writer, root=manifest.root, image_id=writer.image_id_for(slot),
            triplet_id=f"{config.name}-syn-{slot:06d}",
        )
        if isinstance(result, GenerationSkip):
            skipped += 1
            continue
        image, triplet = result
        references.setdefault(reference.image_id, rebase_record(reference, manifest.root, str(out)))
        images.append(image)
        triplets.append(triplet)

    synthetic = DatasetManifest(name=f"{config.name}-synthetic", root=str(out),
                                images=tuple(references.values()) + tuple(images), triplets=tuple(triplets))
    save_manifest(synthetic, out / "synthetic_manifest.json")
    print(f"{len(triplets)} tripletas generadas, {skipped} omitidas")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    manifest = load_manifest(args.manifest)
    pool = select_source_images(split_manifest(manifest, Split.TRAIN),
                                config.dataset.source_images, config.seed)
    result = synthesize_triplets(
        pool, args.n, config.backends.build(),
        SynthesisConfig(generation=config.generation, workers=config.workers,
                        run_name=config.name, show_progress=True),
        seed=config.seed, out_dir=out,
    )
    print(json.dumps(result.manifest.stats.as_dict(), indent=2))
    if result.shortfall is not None:
        print(json.dumps(result.shortfall.to_dict(), indent=2))
        return EXIT_FAILED
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    violations = validate_manifest(manifest)
    print(json.dumps(manifest.stats.as_dict(), indent=2))
    for v in violations:
        print(f"{v.code}\t{v.subject_id}\t{v.detail}")
    return EXIT_OK if not violations else EXIT_FAILED


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    manifest = load_manifest(args.manifest)
    model = make_train_fn(config.train)(manifest, config.train.seed)
    path = save_checkpoint(model, out / "model.tcir")
    print(f"Checkpoint → {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    manifest = load_manifest(args.manifest)
    model = load_checkpoint(args.checkpoint)
    eval_config = config.eval.eval_config(config.dataset.kind)
    result = evaluate(model, manifest, Split(args.split or config.eval.split), eval_config)
    table = render_results_table([(Path(args.checkpoint).stem, result)])
    print(table.text, end="")
    if args.out:
        out = _out_dir(args, config)
        (out / "results.csv").write_text(table.long_csv, encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config(args)
    fractions = args.fractions or config.ablation.fractions
    invalid = [f for f in fractions if not 0 < f <= 1]
    if invalid:
        raise ConfigError(f"Fracciones fuera de (0, 1]: {invalid}")
    out = _out_dir(args, config)
    manifest = load_manifest(args.manifest)
    synthetic = load_manifest(args.synthetic)
    table = run_ablation(
        manifest, fractions, synthetic, make_train_fn(config.train),
        config=config.eval.eval_config(config.dataset.kind), seed=config.seed,
        eval_split=Split(config.eval.split), workers=config.ablation.workers,
    )
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    print(table.render_text(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("forge run requiere --config")
    report = run_configured(load_config(args.config, seed=args.seed, out=args.out))
    print(f"Bundle {'reutilizado' if report.reused else 'completado'}: {report.out_dir}")
    return EXIT_OK if report.completed else EXIT_FAILED


# ==================== PARSER ====================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Archivo TOML de experimento")
    common.add_argument("--seed", type=int, help="Semilla (sobreescribe el archivo)")
    common.add_argument("--out", help="Directorio de salida (sobreescribe el archivo)")

    parser = argparse.ArgumentParser(prog="forge", description="Forjador de tripletas contrafactuales")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("toy", parents=[common], help="Construir mundo de juguete").set_defaults(func=cmd_toy)

    p = sub.add_parser("caption", parents=[common], help="Captions de un manifiesto")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("perturb", parents=[common], help="Ediciones de caption")
    p.add_argument("--captions", required=True, help="captions.jsonl")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("generate", parents=[common], help="Imágenes objetivo")
    p.add_argument("--manifest", required=True)
    p.add_argument("--edits", required=True, help="edits.jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth", parents=[common], help="Síntesis de n tripletas")
    p.add_argument("--manifest", required=True)
    p.add_argument("-n", type=int, required=True, help="Número de tripletas")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", parents=[common], help="Estadísticas y validación")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", parents=[common], help="Entrenar modelo de juguete")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluar checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=[s.value for s in Split])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="Ablación por fracción")
    p.add_argument("--manifest", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--fractions", type=float, nargs="+")
    p.set_defaults(func=cmd_ablate)

    sub.add_parser("run", parents=[common], help="Experimento completo").set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuración inválida: {e}")
        return EXIT_CONFIG
    except SynthesisAborted as e:
        logger.error(f"Síntesis abortada ({e.completed} completadas, checkpoint en {e.checkpoint_dir}): {e}")
        return EXIT_ABORTED
    except (ForgeError, OSError) as e:
        logger.error(f"Error: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
