#!/usr/bin/env python3
"""
Artifact Store - Artefactos de etapa y checkpoints de síntesis
=============================================================
Persistencia de un solo escritor para las etapas del pipeline:
- JSONL de solo-anexado (captions, plan de ediciones, progreso)
- Escrituras atómicas (archivo temporal + os.replace)
- Limpieza de archivos no registrados al reanudar (sin duplicados)

Versión: 1.0.0
"""

import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set

logger = logging.getLogger(__name__)

CAPTIONS_FILE = "captions.jsonl"
EDITS_FILE = "edits.jsonl"
PROGRESS_FILE = "progress.jsonl"


def write_text_atomic(path, text: str) -> Path:
    """Escribe texto UTF-8 con saltos LF de forma atómica."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        _safe_remove_file(Path(tmp_name))
        raise
    return path


def write_json_atomic(path, data) -> Path:
    return write_text_atomic(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")


def read_json(path) -> Optional[dict]:
    path = Path(path)
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _safe_remove_file(file_path: Path) -> bool:
    """Eliminar archivo de forma segura"""
    try:
        if file_path.exists():
            file_path.unlink()
            logger.debug(f"Archivo eliminado: {file_path}")
            return True
        return False
    except OSError as e:
        logger.warning(f"Error eliminando {file_path}: {e}")
        return False


class ArtifactStore:
    """Directorio de checkpoint de una corrida de síntesis."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, name: str) -> Path:
        return self.root / name

    def append(self, name: str, record: dict) -> None:
        """Anexa un registro JSON y fuerza el volcado a disco."""
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with open(self.path(name), "a", encoding="utf-8", newline="\n") as f:
                f.write(line + "\n")
                f.flush()
                os.fsync(f.fileno())

    def records(self, name: str) -> List[dict]:
        """
        Registros de un JSONL. Una última línea truncada (corte a mitad de
        escritura) se descarta con aviso.
        """
        path = self.path(name)
        if not path.exists():
            return []
        lines = path.read_text(encoding="utf-8").splitlines()
        records = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                if number == len(lines):
                    logger.warning(f"{path.name}: última línea incompleta descartada")
                    continue
                raise ValueError(f"{path.name}: línea {number} corrupta")
        return records

    def index(self, name: str, key: str) -> Dict:
        """Último registro por clave (las reescrituras ganan)."""
        return {record[key]: record for record in self.records(name) if key in record}

    def remove_untracked(self, directory, keep: Iterable[str], pattern: str = "*") -> int:
        """
        Elimina archivos de directory cuyo nombre no esté en keep.

        Returns:
            Número de archivos eliminados
        """
        directory = Path(directory)
        if not directory.exists():
            return 0
        keep_set: Set[str] = set(keep)
        cleaned_count = 0
        for file_path in sorted(directory.glob(pattern)):
            if file_path.is_file() and file_path.name not in keep_set:
                if _safe_remove_file(file_path):
                    cleaned_count += 1
        if cleaned_count > 0:
            logger.info(f"Limpiados {cleaned_count} archivos no registrados en {directory}")
        return cleaned_count
