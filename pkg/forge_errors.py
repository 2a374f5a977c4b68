#!/usr/bin/env python3
"""
Forge Errors - Jerarquía de excepciones del forjador de tripletas.

Cada error específico hereda además del builtin equivalente (ValueError,
OSError, RuntimeError) para que el código cliente pueda capturar cualquiera.

Versión: 1.0.0
"""

from typing import Any, Optional


class ForgeError(Exception):
    """Error base del forjador."""


class ManifestIntegrityError(ForgeError, ValueError):
    """Una tripleta apunta a una imagen inexistente."""

    def __init__(self, message: str, triplet_id: Optional[str] = None):
        super().__init__(message)
        self.triplet_id = triplet_id


class MergeError(ForgeError, ValueError):
    """Registros en conflicto bajo el mismo id al fusionar manifiestos."""


class DatasetLoadError(ForgeError, ValueError):
    """Archivo de dataset con esquema inesperado."""

    def __init__(self, message: str, record_index: Optional[int] = None):
        super().__init__(message)
        self.record_index = record_index


class ConfigError(ForgeError, ValueError):
    """Configuración inválida."""


class BackendError(ForgeError, RuntimeError):
    """Respuesta inválida de un servicio externo (se conserva el payload crudo)."""

    def __init__(self, message: str, raw: Any = None, status_code: Optional[int] = None):
        super().__init__(message)
        self.raw = raw
        self.status_code = status_code


class BackendUnavailableError(BackendError):
    """El servicio no respondió tras agotar los reintentos."""


class UnperturbableError(ForgeError, ValueError):
    """El componente pedido no se puede localizar en el caption."""


class EditParseError(ForgeError, ValueError):
    """Respuesta del LLM no interpretable como edición de un solo tramo."""

    def __init__(self, code: str, message: str, raw: Any = None):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.raw = raw


class EditValidationError(ForgeError, ValueError):
    """Edición que no cumple la política de validate_edit."""

    def __init__(self, message: str, violations=None, raw: Any = None):
        super().__init__(message)
        self.violations = list(violations or [])
        self.raw = raw


class GenerationError(ForgeError, RuntimeError):
    """Fallo del backend de generación, con el contexto de la edición."""

    def __init__(self, message: str, edit_context: Optional[dict] = None):
        super().__init__(message)
        self.edit_context = edit_context or {}


class InversionQualityError(GenerationError):
    """La reconstrucción supera la tolerancia; el intento se omite."""

    def __init__(self, message: str, reconstruction_error: float, tolerance: float):
        super().__init__(message)
        self.reconstruction_error = reconstruction_error
        self.tolerance = tolerance


class EvaluationError(ForgeError, ValueError):
    """Fallo de evaluación asociado a una tripleta concreta."""

    def __init__(self, message: str, triplet_id: Optional[str] = None):
        super().__init__(message)
        self.triplet_id = triplet_id


class TrainingError(ForgeError, RuntimeError):
    """Pérdida no finita durante el entrenamiento."""

    def __init__(self, message: str, batch_dump: Optional[dict] = None):
        super().__init__(message)
        self.batch_dump = batch_dump or {}


class StageError(ForgeError, RuntimeError):
    """Fallo de una etapa del experimento."""

    def __init__(self, stage: str, cause: BaseException, item_id: Optional[str] = None):
        super().__init__(f"Etapa '{stage}' falló ({item_id or '-'}): {cause}")
        self.stage = stage
        self.item_id = item_id
        self.cause = cause


class SynthesisAborted(ForgeError, RuntimeError):
    """Síntesis abortada con checkpoint persistido; puede reanudarse."""

    def __init__(self, message: str, checkpoint_dir: Optional[str] = None, completed: int = 0):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir
        self.completed = completed
