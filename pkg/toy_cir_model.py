#!/usr/bin/env python3
"""
Toy CIR Model - Modelo mínimo de recuperación compuesta entrenable
=================================================================
- Codificador de imagen: bolsa de atributos hasheada desde el sidecar
- Codificador de texto: unigramas (mismo espacio de hash) + bigramas
- Combinador: capa afín sobre [imagen; texto] + normalización L2
- Pérdida contrastiva in-batch (InfoNCE) con gradientes analíticos y SGD
- Chequeo de gradientes por diferencias finitas centrales
- Checkpoints binarios versionados con cabecera JSON

Versión: 1.0.0
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from forge_errors import ConfigError, TrainingError
from forge_limits import LIMITS
from retrieval_eval import normalize
from toy_world import ToyVocabulary, read_sidecar
from triplet_core import DatasetManifest, ImageRecord, Split, Triplet, tokenize

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TCIR"
CHECKPOINT_VERSION = 1
DEFAULT_HASH_SEED = 0

INIT_IDENTITY = "identity"
INIT_RANDOM = "random"


# ==================== CODIFICADORES ====================

def _hash_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


@lru_cache(maxsize=65536)
def _token_vector_cached(token: str, dim: int, hash_seed: int) -> np.ndarray:
    rng = np.random.default_rng(_hash_int(f"{hash_seed}:{token}"))
    vector = normalize(rng.standard_normal(dim))
    vector.setflags(write=False)
    return vector


def token_vector(token: str, dim: int = LIMITS.EMBEDDING_DIM, hash_seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """Vector unitario pseudoaleatorio determinista de un token."""
    return _token_vector_cached(token, int(dim), int(hash_seed))


def featurize_toy_image(record: ImageRecord, root=".", dim: int = LIMITS.EMBEDDING_DIM,
                        hash_seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """
    Bolsa de atributos hasheada de una escena de juguete (unitaria).

    Raises:
        FileNotFoundError: la imagen no tiene sidecar de escena
    """
    if not record.sidecar:
        raise FileNotFoundError(f"La imagen {record.image_id} no tiene sidecar de escena")
    scene = read_sidecar(Path(root) / record.sidecar)
    total = np.zeros(dim)
    for value in scene.to_dict().values():
        if value:
            for token in tokenize(value):
                total += token_vector(token, dim, hash_seed)
    return normalize(total)


def embed_text(text: str, dim: int = LIMITS.EMBEDDING_DIM, hash_seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """Unigramas en el espacio de la imagen más bigramas (orden de palabras)."""
    tokens = tokenize(text)
    total = np.zeros(dim)
    for token in tokens:
        total += token_vector(token, dim, hash_seed)
    for first, second in zip(tokens, tokens[1:]):
        total += token_vector(f"{first}_{second}", dim, hash_seed)
    return normalize(total)


def token_collisions(vocab: ToyVocabulary, dim: int = LIMITS.EMBEDDING_DIM,
                     hash_seed: int = DEFAULT_HASH_SEED, threshold: float = 0.999) -> List[Tuple[str, str]]:
    """Pares de tokens del vocabulario con vectores (casi) idénticos."""
    tokens = vocab.all_tokens()
    vectors = np.stack([token_vector(t, dim, hash_seed) for t in tokens])
    sims = vectors @ vectors.T
    return [(tokens[i], tokens[j]) for i in range(len(tokens)) for j in range(i + 1, len(tokens))
            if sims[i, j] >= threshold]


# ==================== MODELO ====================

class ToyCIRModel:
    """Combinador afín q = normalize(W [i; t] + b) sobre codificadores fijos."""

    def __init__(self, dim: int = LIMITS.EMBEDDING_DIM, hash_seed: int = DEFAULT_HASH_SEED,
                 init: str = INIT_RANDOM, seed: int = 0, init_scale: Optional[float] = None):
        self.dim = int(dim)
        self.hash_seed = int(hash_seed)
        if init == INIT_IDENTITY:
            self.W = np.hstack([np.eye(self.dim), np.eye(self.dim)])
        elif init == INIT_RANDOM:
            scale = init_scale if init_scale is not None else 1.0 / math.sqrt(2 * self.dim)
            self.W = np.random.default_rng(seed).normal(0.0, scale, size=(self.dim, 2 * self.dim))
        else:
            raise ConfigError(f"Inicialización desconocida: {init}")
        self.b = np.zeros(self.dim)
        self._image_cache: Dict[Tuple[str, str], np.ndarray] = {}

    # --- Interfaz CIRModel ---

    def image_embed(self, image: ImageRecord, root=".") -> np.ndarray:
        key = (str(root), image.image_id)
        if key not in self._image_cache:
            self._image_cache[key] = featurize_toy_image(image, root, self.dim, self.hash_seed)
        return self._image_cache[key]

    def text_embed(self, text: str) -> np.ndarray:
        return embed_text(text, self.dim, self.hash_seed)

    def compose(self, image_vector: np.ndarray, text_vector: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(image_vector, dtype=np.float64), np.asarray(text_vector, dtype=np.float64)])
        return normalize(self.W @ x + self.b)

    # --- Parámetros ---

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64)
        n_w = self.dim * 2 * self.dim
        if params.size != n_w + self.dim:
            raise ValueError(f"Vector de parámetros de tamaño {params.size}, se esperaba {n_w + self.dim}")
        self.W = params[:n_w].reshape(self.dim, 2 * self.dim).copy()
        self.b = params[n_w:].copy()

    def batch_arrays(self, triplets: Sequence[Triplet], manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
        """X = [i_ref; t] por fila y G = embedding del objetivo por fila."""
        index = manifest.image_index()
        X = np.stack([
            np.concatenate([self.image_embed(index[t.reference_image_id], manifest.root),
                            self.text_embed(t.modification_text)])
            for t in triplets
        ])
        G = np.stack([self.image_embed(index[t.target_image_id], manifest.root) for t in triplets])
        return X, G


# ==================== PÉRDIDA CONTRASTIVA ====================

@dataclass(frozen=True)
class LossGradients:
    loss: float
    grad_W: np.ndarray
    grad_b: np.ndarray
    # dL/dZ por fila del batch (pre-normalización)
    grad_Z: np.ndarray


def contrastive_loss(W: np.ndarray, b: np.ndarray, X: np.ndarray, G: np.ndarray,
                     temperature: float) -> LossGradients:
    """
    Media sobre el batch de −log softmax_j(q_n · g_j / τ) en j = n.
    """
    Z = X @ W.T + b
    r = np.linalg.norm(Z, axis=1)
    Q = Z / r[:, None]
    S = (Q @ G.T) / temperature
    m = S.max(axis=1)
    E = np.exp(S - m[:, None])
    denom = E.sum(axis=1)
    batch = S.shape[0]
    losses = m + np.log(denom) - np.diag(S)
    loss = float(losses.mean())

    P = E / denom[:, None]
    dS = (P - np.eye(batch)) / batch
    dQ = (dS @ G) / temperature
    dZ = (dQ - Q * (dQ * Q).sum(axis=1)[:, None]) / r[:, None]
    return LossGradients(loss=loss, grad_W=dZ.T @ X, grad_b=dZ.sum(axis=0), grad_Z=dZ)


def finite_difference_check(model: ToyCIRModel, batch: Tuple[np.ndarray, np.ndarray],
                            epsilon: float = 1e-5, temperature: float = 0.5) -> float:
    """
    Máximo error relativo entre gradiente analítico y diferencias centrales.

    El denominador se acota inferiormente a 1e-4 × max(1, |grad|∞).
    """
    if epsilon <= 0:
        raise ValueError("epsilon debe ser > 0")
    X, G = batch
    params = model.params
    n_w = model.W.size
    shape = model.W.shape

    def loss_at(p):
        return contrastive_loss(p[:n_w].reshape(shape), p[n_w:], X, G, temperature).loss

    analytic_parts = contrastive_loss(model.W, model.b, X, G, temperature)
    analytic = np.concatenate([analytic_parts.grad_W.ravel(), analytic_parts.grad_b])
    numeric = np.empty_like(params)
    for i in range(params.size):
        plus, minus = params.copy(), params.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        numeric[i] = (loss_at(plus) - loss_at(minus)) / (2 * epsilon)

    floor = 1e-4 * max(1.0, float(np.abs(analytic).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


# ==================== ENTRENAMIENTO ====================

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.5
    temperature: float = 0.1
    seed: int = 0
    dim: int = LIMITS.EMBEDDING_DIM
    hash_seed: int = DEFAULT_HASH_SEED
    init: str = INIT_RANDOM

    def validate(self) -> "TrainConfig":
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs={self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate={self.learning_rate}")
        if not self.temperature > 0:
            problems.append(f"temperature={self.temperature}")
        if self.dim < 1:
            problems.append(f"dim={self.dim}")
        if self.init not in (INIT_IDENTITY, INIT_RANDOM):
            problems.append(f"init={self.init}")
        if problems:
            raise ConfigError("Configuración de entrenamiento inválida: " + ", ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def train(model: ToyCIRModel, triplets: Sequence[Triplet], manifest: DatasetManifest,
          config: TrainConfig,
          progress_callback: Optional[Callable[[int, int], None]] = None) -> Tuple[ToyCIRModel, List[float]]:
    """
    SGD sobre la pérdida contrastiva in-batch.

    Los batches se forman con una permutación sembrada por época; si
    batch_size supera el número de tripletas se usa un único batch.

    Returns:
        (modelo entrenado, pérdida media por época)

    Raises:
        TrainingError: pérdida no finita (incluye volcado del batch)
    """
    config.validate()
    triplets = list(triplets)
    if not triplets:
        raise ValueError("No hay tripletas para entrenar")
    X_all, G_all = model.batch_arrays(triplets, manifest)
    n = len(triplets)
    batch_size = min(config.batch_size, n)
    rng = np.random.default_rng(config.seed)
    trace: List[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            result = contrastive_loss(model.W, model.b, X_all[rows], G_all[rows], config.temperature)
            if not (math.isfinite(result.loss) and np.all(np.isfinite(result.grad_W))):
                raise TrainingError(
                    f"Pérdida no finita en la época {epoch + 1}",
                    batch_dump={
                        "epoch": epoch + 1,
                        "loss": result.loss,
                        "triplet_ids": [triplets[i].triplet_id for i in rows],
                    },
                )
            model.W -= config.learning_rate * result.grad_W
            model.b -= config.learning_rate * result.grad_b
            total += result.loss * len(rows)
        trace.append(total / n)
        logger.debug(f"Época {epoch + 1}/{config.epochs}: pérdida {trace[-1]:.4f}")
        if progress_callback:
            progress_callback(epoch + 1, config.epochs)

    logger.info(f"Entrenamiento: {n} tripletas, pérdida {trace[0]:.4f} → {trace[-1]:.4f}")
    return model, trace


def training_triplets(manifest: DatasetManifest) -> List[Triplet]:
    """Tripletas cuya referencia es de entrenamiento."""
    index = manifest.image_index()
    return [t for t in manifest.triplets
            if t.reference_image_id in index and index[t.reference_image_id].split == Split.TRAIN]


def make_train_fn(config: TrainConfig) -> Callable[[DatasetManifest, int], ToyCIRModel]:
    """train_fn(manifest, seed) para el arnés de ablación."""
    config.validate()

    def train_fn(manifest: DatasetManifest, seed: int) -> ToyCIRModel:
        run_config = TrainConfig(**{**config.to_dict(), "seed": seed})
        model = ToyCIRModel(run_config.dim, run_config.hash_seed, run_config.init, seed=seed)
        trained, _ = train(model, training_triplets(manifest), manifest, run_config)
        return trained

    return train_fn


# ==================== CHECKPOINTS ====================

def save_checkpoint(model: ToyCIRModel, path) -> Path:
    """MAGIC + longitud de cabecera (uint32 LE) + cabecera JSON + float64 LE."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.params.astype("<f8")
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "hash_seed": model.hash_seed,
        "num_params": int(params.size),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.tobytes())
    return path


def load_checkpoint(path) -> ToyCIRModel:
    """
    Raises:
        ValueError: contenedor inválido o versión no soportada
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 8:
        raise ValueError(f"{path}: no es un checkpoint de modelo")
    (header_len,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + header_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"Versión de checkpoint no soportada: {header.get('format_version')}")
    params = np.frombuffer(data[8 + header_len:], dtype="<f8")
    if params.size != header["num_params"]:
        raise ValueError(f"Checkpoint truncado: {params.size} de {header['num_params']} parámetros")
    model = ToyCIRModel(dim=header["dim"], hash_seed=header["hash_seed"], init=INIT_IDENTITY)
    model.set_params(params.astype(np.float64))
    return model
