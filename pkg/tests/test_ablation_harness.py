import pytest

from ablation_harness import ARM_MINED, ARM_ORIGINAL, ARM_SYNTHETIC, run_ablation, verify_nested_prefixes
from dataset_io import subsample_images
from forge_errors import StageError
from retrieval_eval import EvalConfig
from toy_cir_model import ToyCIRModel
from triplet_core import DatasetManifest, Split, split_manifest


class RecordingTrainer:
    """train_fn que no entrena: registra lo que recibe y devuelve un modelo fijo."""

    def __init__(self):
        self.calls = []

    def __call__(self, manifest, seed):
        self.calls.append((len(manifest.images), len(manifest.triplets), seed))
        return ToyCIRModel(dim=16, seed=seed)


def test_single_fraction_shape(small_world):
    trainer = RecordingTrainer()
    table = run_ablation(small_world, [0.3], DatasetManifest("empty"), trainer, EvalConfig(ks=(1, 5, 10)), seed=1)
    assert len(table.rows) == 2 * 3
    assert {(r.fraction, r.arm) for r in table.rows} == {(0.3, ARM_ORIGINAL), (0.3, ARM_SYNTHETIC)}
    assert table.kept_images[0.3] == 24
    assert len(trainer.calls) == 2
    assert table.to_csv().splitlines()[0] == "fraction,arm,k,recall"
    assert table.to_csv().splitlines()[1].startswith("0.3,original,1,")


def test_nested_prefixes_and_training_runs(small_world):
    trainer = RecordingTrainer()
    fractions = [0.1, 0.3, 1.0]
    table = run_ablation(small_world, fractions, DatasetManifest("empty"), trainer,
                         EvalConfig(ks=(10,)), seed=4)
    assert len(trainer.calls) == 6
    assert table.prefix_nested
    originals = split_manifest(small_world, Split.TRAIN)
    kept = [{img.image_id for img in subsample_images(originals, f, 4).images} for f in fractions]
    assert kept[0] <= kept[1] <= kept[2]
    assert [table.kept_images[f] for f in fractions] == [len(k) for k in kept]
    assert verify_nested_prefixes(originals, fractions, seed=4)


def test_synthetic_arm_adds_triplets(small_world):
    originals = split_manifest(small_world, Split.TRAIN)
    first_families = {img.image_id for img in originals.images[:8]}
    extra = small_world.with_contents(
        images=originals.images[:8],
        triplets=[t for t in originals.triplets
                  if t.reference_image_id in first_families and t.target_image_id in first_families])
    trainer = RecordingTrainer()
    table = run_ablation(small_world, [0.5], extra, trainer, EvalConfig(ks=(1,)), seed=0,
                         extra_arms={ARM_MINED: DatasetManifest("mined")})
    assert table.train_triplets[(0.5, ARM_SYNTHETIC)] >= table.train_triplets[(0.5, ARM_ORIGINAL)]
    assert (0.5, ARM_MINED) in table.results
    assert "synthetic" in table.render_text()


def test_invalid_fraction(small_world):
    with pytest.raises(ValueError):
        run_ablation(small_world, [0.0], DatasetManifest("empty"), RecordingTrainer())


def test_training_failure_carries_fraction_and_arm(small_world):
    def broken(manifest, seed):
        raise RuntimeError("sin memoria")

    with pytest.raises(StageError) as excinfo:
        run_ablation(small_world, [0.3], DatasetManifest("empty"), broken)
    assert excinfo.value.stage == "ablation"
    assert excinfo.value.item_id == "fraction=0.3,arm=original"
