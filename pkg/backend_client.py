#!/usr/bin/env python3
"""
Backend Client - Adaptador HTTP común para los servicios externos
-----------------------------------------------------------------
Cliente compartido por los backends externos de captioning, perturbación y
generación: POST JSON con timeout, reintentos con backoff exponencial,
límite de peticiones en vuelo y decodificación de imágenes base64/data URI.

Versión: 1.0.0
"""

import base64
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import datauri
import requests
from dotenv import load_dotenv

from forge_errors import BackendError, BackendUnavailableError
from forge_limits import LIMITS

load_dotenv(override=True)
logger = logging.getLogger(__name__)

# Códigos HTTP que justifican reintento
RETRYABLE_STATUS = {429, 500, 502, 503, 504}

ENV_ENDPOINTS = {
    "captioner": "FORGE_CAPTIONER_ENDPOINT",
    "perturber": "FORGE_PERTURBER_ENDPOINT",
    "generator": "FORGE_GENERATOR_ENDPOINT",
}


def endpoint_from_env(service: str) -> Optional[str]:
    """Endpoint de un servicio desde el entorno (.env incluido)."""
    return os.environ.get(ENV_ENDPOINTS[service]) or None


def encode_image_base64(path) -> str:
    """Lee un raster y lo codifica en base64 (sin prefijo data:)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Imagen no encontrada: {path}")
    return base64.b64encode(path.read_bytes()).decode("ascii")


def decode_image_payload(payload: str) -> bytes:
    """
    Decodifica una imagen devuelta por un servicio.

    Acepta data URIs (data:image/png;base64,...) o base64 plano.
    """
    if payload.startswith("data:"):
        try:
            return datauri.parse(payload).data
        except Exception:
            # Fallback con regex
            match = re.match(r"data:([^;]+);base64,(.+)", payload, re.DOTALL)
            if not match:
                raise BackendError("Data URI de imagen no interpretable", raw=payload[:200])
            payload = match.group(2)
    try:
        return base64.b64decode(payload, validate=True)
    except (ValueError, TypeError) as e:
        raise BackendError(f"Imagen base64 inválida: {e}", raw=payload[:200])


def require_fields(payload: Any, fields: Iterable[str], route: str) -> Dict[str, Any]:
    """Verifica que la respuesta sea un objeto JSON con los campos esperados."""
    if not isinstance(payload, dict):
        raise BackendError(f"Respuesta de {route} no es un objeto JSON", raw=payload)
    missing = [name for name in fields if name not in payload]
    if missing:
        raise BackendError(f"Respuesta de {route} sin campos {missing}", raw=payload)
    return payload


class ServiceClient:
    """Cliente JSON para un endpoint con reintentos y límite de concurrencia."""

    def __init__(self, endpoint: str, timeout: float = LIMITS.REQUEST_TIMEOUT_SECONDS,
                 max_retries: int = LIMITS.MAX_RETRIES,
                 max_in_flight: int = LIMITS.MAX_IN_FLIGHT_REQUESTS,
                 backoff_base: float = 1.0, session: Optional[requests.Session] = None):
        """
        Args:
            endpoint: URL base del servicio
            timeout: Timeout por petición en segundos
            max_retries: Intentos totales ante errores transitorios
            max_in_flight: Peticiones simultáneas permitidas
            backoff_base: Factor del backoff exponencial (0 desactiva la espera)
        """
        if not endpoint:
            raise ValueError("Se requiere endpoint para el servicio externo")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max(1, int(max_retries))
        self.backoff_base = backoff_base
        self.session = session or requests.Session()
        self._in_flight = threading.BoundedSemaphore(max(1, int(max_in_flight)))

    def post_json(self, route: str, body: Dict[str, Any]) -> Dict[str, Any]:
        """
        POST {endpoint}/{route} con cuerpo JSON.

        Raises:
            BackendError: respuesta no-200 o cuerpo malformado (payload adjunto)
            BackendUnavailableError: servicio inalcanzable tras agotar reintentos
        """
        url = f"{self.endpoint}/{route.lstrip('/')}"
        last_error: Optional[Exception] = None

        for attempt in range(self.max_retries):
            try:
                with self._in_flight:
                    response = self.session.post(url, json=body, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = e
                logger.warning(f"Servicio {url} inalcanzable (intento {attempt + 1}): {e}")
                if attempt < self.max_retries - 1:
                    self._backoff(attempt)
                continue

            if response.status_code in RETRYABLE_STATUS:
                logger.warning(f"{url} respondió {response.status_code} (intento {attempt + 1})")
                last_error = BackendError(f"HTTP {response.status_code}", raw=response.text,
                                          status_code=response.status_code)
                if attempt < self.max_retries - 1:
                    self._backoff(attempt)
                continue

            if response.status_code != 200:
                raise BackendError(
                    f"{url} respondió {response.status_code}",
                    raw=response.text, status_code=response.status_code,
                )
            try:
                return response.json()
            except ValueError:
                raise BackendError(f"Cuerpo no-JSON desde {url}", raw=response.text,
                                   status_code=response.status_code)

        raise BackendUnavailableError(
            f"Servicio {url} no disponible tras {self.max_retries} intentos: {last_error}",
            raw=str(last_error),
        )

    def _backoff(self, attempt: int):
        if self.backoff_base > 0:
            time.sleep(self.backoff_base * (2 ** attempt))
