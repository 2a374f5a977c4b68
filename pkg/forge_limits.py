#!/usr/bin/env python3
"""
Forge Limits - Límites y valores por defecto centralizados.

ÚNICO PUNTO DE VERDAD para concurrencia, reintentos, tolerancias y parámetros
por defecto de generación del forjador de tripletas.
"""

from dataclasses import dataclass
from typing import NamedTuple


class LimitCheckResult(NamedTuple):
    """Resultado de verificación de límites."""
    within_limits: bool
    exceeded: list[str]


@dataclass(frozen=True)
class ForgeLimits:
    """
    Límites unificados del pipeline.

    Los valores de generación son los puntos de operación habituales de
    inversión null-text + prompt-to-prompt; se exponen como configuración
    para que los experimentos puedan variarlos.
    """

    # === CONCURRENCIA ===
    DEFAULT_WORKERS: int = 2
    MAX_WORKERS: int = 10
    MIN_WORKERS: int = 1
    MAX_IN_FLIGHT_REQUESTS: int = 4

    # === SERVICIOS EXTERNOS ===
    REQUEST_TIMEOUT_SECONDS: float = 60.0
    MAX_RETRIES: int = 3

    # === GENERACIÓN ===
    NUM_INVERSION_STEPS: int = 50
    GUIDANCE_SCALE: float = 7.5
    CROSS_ATTENTION_FRACTION: float = 0.8
    SELF_ATTENTION_FRACTION: float = 0.4
    NULL_TEXT_OPT_ITERS: int = 10
    OUTPUT_SIZE: int = 512
    INVERSION_TOLERANCE: float = 0.05

    # === SÍNTESIS ===
    RETRY_BUDGET_PER_IMAGE: int = 3
    SOURCE_IMAGES: int = 1500
    MAX_REPLACEMENT_TOKENS: int = 3

    # === MUNDO DE JUGUETE ===
    TOY_RASTER_SIZE: int = 64
    EMBEDDING_DIM: int = 64

    def clamp_workers(self, workers: int) -> int:
        """Ajusta el número de workers al rango permitido."""
        return max(self.MIN_WORKERS, min(self.MAX_WORKERS, int(workers)))

    def check_generation(self, steps: int, cross_frac: float, self_frac: float) -> LimitCheckResult:
        """
        Verifica parámetros de generación y retorna resultado detallado.

        Returns:
            LimitCheckResult con estado y lista de excedencias.
        """
        exceeded = []

        if steps < 1:
            exceeded.append(f"Pasos de inversión: {steps} < 1")
        for name, value in (("cross_attention", cross_frac), ("self_attention", self_frac)):
            if not 0.0 <= value <= 1.0:
                exceeded.append(f"Fracción {name}: {value} fuera de [0, 1]")

        return LimitCheckResult(within_limits=not exceeded, exceeded=exceeded)

    def __str__(self) -> str:
        """Representación legible de los límites."""
        return (
            f"Límites del forjador:\n"
            f"  Workers por defecto: {self.DEFAULT_WORKERS} (máx {self.MAX_WORKERS})\n"
            f"  Reintentos HTTP: {self.MAX_RETRIES}, timeout {self.REQUEST_TIMEOUT_SECONDS:.0f}s\n"
            f"  Inversión: {self.NUM_INVERSION_STEPS} pasos, tolerancia {self.INVERSION_TOLERANCE}\n"
            f"  Presupuesto de reintentos por imagen: {self.RETRY_BUDGET_PER_IMAGE}"
        )


# === INSTANCIA GLOBAL ÚNICA ===
LIMITS = ForgeLimits()
