#!/usr/bin/env python3
"""
Caption Perturber - Caption contrafactual y texto de modificación
=======================================================================
Edita exactamente un componente del caption de referencia:
- rule_based: sustitución determinista desde el vocabulario de juguete
- external_llm: servicio LLM vía POST {endpoint}/perturb con prompt versionado

Incluye el parser de componentes (gramática toy + heurística sin POS),
el parser de respuestas del LLM por diff de tokens, la política de
validación de ediciones y el registro de deduplicación de una corrida.

Versión: 1.0.0
"""

import difflib
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from backend_client import ServiceClient
from forge_errors import ConfigError, EditParseError, EditValidationError, UnperturbableError
from forge_limits import LIMITS
from toy_world import ToyVocabulary, default_vocabulary
from triplet_core import (
    KIND_ORDER, Caption, CaptionEdit, ComponentKind, Span, Violation, token_positions,
    tokenize,
)

logger = logging.getLogger(__name__)

MODIFICATION_TEMPLATE = "replace the {old} with {new}"

PROMPTS_DIR = Path(__file__).parent / "prompts"
PROMPT_VERSION = "v1"

# Vocabulario de la heurística de componentes
_ARTICLES = {"a", "an", "the"}
_DOMAIN_WORDS = {
    "photo", "photograph", "picture", "image", "painting", "drawing", "sketch",
    "illustration", "rendering", "cartoon", "snapshot",
}
_STOP_WORDS = {
    "with", "in", "on", "at", "near", "under", "over", "and", "is", "are", "of", "by",
    "next", "behind", "from", "to", "into", "while", "that", "which", "down", "up",
    "through", "across", "along", "beside", "against", "inside",
}
_EXTRA_ADJECTIVES = {
    "small", "large", "big", "little", "old", "young", "tall", "short", "wooden",
    "shiny", "dark", "bright", "brown", "gray", "grey", "pink", "silver", "golden",
}


class PerturberKind(str, Enum):
    EXTERNAL_LLM = "external_llm"
    RULE_BASED = "rule_based"


def uniform_kind_weights() -> Dict[ComponentKind, float]:
    return {kind: 1.0 for kind in KIND_ORDER}


@dataclass(frozen=True)
class PerturberBackend:
    """Configuración del perturbador (pesos de muestreo por tipo de componente)."""
    kind: PerturberKind
    endpoint: Optional[str] = None
    vocabulary: Optional[ToyVocabulary] = field(default=None, compare=False, hash=False)
    kind_weights: Mapping[ComponentKind, float] = field(
        default_factory=uniform_kind_weights, compare=False, hash=False
    )
    timeout: float = LIMITS.REQUEST_TIMEOUT_SECONDS
    max_retries: int = LIMITS.MAX_RETRIES
    max_in_flight: int = LIMITS.MAX_IN_FLIGHT_REQUESTS

    def __post_init__(self):
        weights = {ComponentKind(k): float(v) for k, v in self.kind_weights.items()}
        if any(w < 0 for w in weights.values()):
            raise ConfigError(f"Pesos de componentes negativos: {weights}")
        if sum(weights.values()) <= 0:
            raise ConfigError("La suma de kind_weights debe ser > 0")
        object.__setattr__(self, "kind_weights", weights)

        if self.kind == PerturberKind.RULE_BASED:
            if self.endpoint:
                raise ConfigError("El perturbador rule_based no admite endpoint")
            if self.vocabulary is None:
                object.__setattr__(self, "vocabulary", default_vocabulary())
        elif not self.endpoint:
            raise ConfigError("El perturbador external_llm requiere endpoint")

    @classmethod
    def rule_based(cls, vocabulary: Optional[ToyVocabulary] = None,
                   kind_weights: Optional[Mapping[ComponentKind, float]] = None) -> "PerturberBackend":
        return cls(kind=PerturberKind.RULE_BASED, vocabulary=vocabulary,
                   kind_weights=kind_weights or uniform_kind_weights())

    @classmethod
    def external(cls, endpoint: str, kind_weights: Optional[Mapping[ComponentKind, float]] = None,
                 **kwargs) -> "PerturberBackend":
        return cls(kind=PerturberKind.EXTERNAL_LLM, endpoint=endpoint,
                   kind_weights=kind_weights or uniform_kind_weights(), **kwargs)


@lru_cache(maxsize=None)
def _client_for(endpoint: str, timeout: float, max_retries: int, max_in_flight: int) -> ServiceClient:
    return ServiceClient(endpoint, timeout=timeout, max_retries=max_retries, max_in_flight=max_in_flight)


@lru_cache(maxsize=None)
def load_prompt(version: str = PROMPT_VERSION) -> str:
    """Instrucción + ejemplos few-shot del adaptador LLM (asset versionado)."""
    path = PROMPTS_DIR / f"perturb_prompt_{version}.txt"
    if not path.exists():
        raise ConfigError(f"Prompt de perturbación no encontrado: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return "\n".join(line for line in lines if not line.startswith("#")).strip()


# ==================== PARSER DE COMPONENTES ====================

def _parse_toy_grammar(tokens: Sequence[str]) -> Optional[Dict[ComponentKind, Span]]:
    """
    Inversión de la plantilla toy por defecto:
    a {domain} of a {adjective} {subject}[ with a {object}] on a {background} background
    """
    n = len(tokens)
    if n < 9 or tokens[0] != "a" or tokens[2] != "of" or tokens[3] != "a" or tokens[-1] != "background":
        return None

    # Último "on a" antes del fondo
    on_index = None
    for i in range(n - 3, 5, -1):
        if tokens[i] == "on" and tokens[i + 1] == "a":
            on_index = i
            break
    if on_index is None or on_index + 2 >= n - 1:
        return None

    components = {
        ComponentKind.DOMAIN: (1, 2),
        ComponentKind.ADJECTIVE: (4, 5),
        ComponentKind.BACKGROUND: (on_index + 2, n - 1),
    }
    subject_end = on_index
    for j in range(6, on_index - 2):
        if tokens[j] == "with" and tokens[j + 1] == "a":
            components[ComponentKind.OBJECT] = (j + 2, on_index)
            subject_end = j
            break
    if subject_end <= 5:
        return None
    components[ComponentKind.SUBJECT] = (5, subject_end)
    return components


def _phrase_end(tokens: Sequence[str], start: int, limit: Optional[int] = None) -> int:
    """Fin del sintagma: primera palabra funcional, artículo o gerundio."""
    limit = len(tokens) if limit is None else limit
    end = start
    while end < limit:
        tok = tokens[end]
        if tok in _STOP_WORDS or tok in _ARTICLES or (tok.endswith("ing") and len(tok) > 4):
            break
        end += 1
    return end


def _parse_heuristic(tokens: Sequence[str], adjectives: Set[str]) -> Dict[ComponentKind, Span]:
    n = len(tokens)
    components: Dict[ComponentKind, Span] = {}
    pos = 0

    if n >= 3 and tokens[0] in _ARTICLES and tokens[1] in _DOMAIN_WORDS and tokens[2] == "of":
        components[ComponentKind.DOMAIN] = (1, 2)
        pos = 3

    # Sujeto: sintagma nominal tras el primer artículo
    article = next((i for i in range(pos, n) if tokens[i] in _ARTICLES), None)
    subject_end = pos
    if article is not None:
        start = article + 1
        subject_end = _phrase_end(tokens, start)
        if subject_end > start:
            if subject_end - start >= 2 and tokens[start] in adjectives:
                components[ComponentKind.ADJECTIVE] = (start, start + 1)
                start += 1
            components[ComponentKind.SUBJECT] = (start, subject_end)

    # Fondo: "X in the background" o "in/on the X" al final
    background: Optional[Span] = None
    if n >= 3 and tokens[-1] == "background" and tokens[-2] == "the" and tokens[-3] in ("in", "on"):
        end = n - 3
        start = end
        while start > subject_end and end - start < LIMITS.MAX_REPLACEMENT_TOKENS:
            tok = tokens[start - 1]
            if tok in _STOP_WORDS or tok in _ARTICLES:
                break
            start -= 1
        if start < end:
            background = (start, end)
    else:
        for p in range(n - 3, subject_end - 1, -1):
            if tokens[p] in ("in", "on") and tokens[p + 1] == "the":
                end = _phrase_end(tokens, p + 2)
                if end > p + 2:
                    background = (p + 2, end)
                break
    if background is not None:
        components[ComponentKind.BACKGROUND] = background

    # Objeto: "with a X" justo tras el sujeto
    if (ComponentKind.SUBJECT in components and subject_end + 2 < n
            and tokens[subject_end] == "with" and tokens[subject_end + 1] in _ARTICLES):
        start = subject_end + 2
        end = _phrase_end(tokens, start)
        if end > start and (background is None or end <= background[0]):
            components[ComponentKind.OBJECT] = (start, end)

    return components


def parse_components(caption: Caption, vocabulary: Optional[ToyVocabulary] = None) -> Caption:
    """
    Localiza los tramos de los componentes del caption.

    Si el caption ya trae componentes (captioner toy) se devuelve tal cual.
    Primero intenta la gramática toy; si no encaja aplica la heurística
    (sujeto tras el primer artículo, fondo final, adjetivo previo).
    """
    if caption.components is not None:
        return caption
    tokens = tokenize(caption.text)
    components = _parse_toy_grammar(tokens)
    if components is None:
        vocab = vocabulary or default_vocabulary()
        adjectives = set(vocab.values(ComponentKind.ADJECTIVE)) | _EXTRA_ADJECTIVES
        components = _parse_heuristic(tokens, adjectives)
    ordered = {kind: components[kind] for kind in KIND_ORDER if kind in components}
    return Caption(image_id=caption.image_id, text=caption.text, components=ordered)


# ==================== EDICIÓN ====================

def replacement_index(seed: int, caption_text: str, modulus: int) -> int:
    """Índice determinista hash(seed, caption) mod modulus."""
    if modulus <= 0:
        raise ValueError("modulus debe ser positivo")
    digest = hashlib.sha256(f"{int(seed)}|{caption_text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % modulus


def shift_components(components: Optional[Mapping[ComponentKind, Span]], span_ref: Span,
                     span_cf: Span) -> Optional[Dict[ComponentKind, Span]]:
    """Reubica los tramos tras sustituir span_ref por un tramo de otra longitud."""
    if components is None:
        return None
    delta = (span_cf[1] - span_cf[0]) - (span_ref[1] - span_ref[0])
    shifted = {}
    for kind, (start, end) in components.items():
        if (start, end) == tuple(span_ref):
            shifted[kind] = tuple(span_cf)
        elif start >= span_ref[1]:
            shifted[kind] = (start + delta, end + delta)
        elif end <= span_ref[0]:
            shifted[kind] = (start, end)
        # Tramos que se solapan con la edición dejan de estar localizados
    return shifted


def apply_replacement(caption: Caption, kind: ComponentKind, new_value: str,
                      modification_text: Optional[str] = None) -> CaptionEdit:
    """Sustituye el tramo de `kind` por new_value preservando el resto del texto."""
    span = (caption.components or {}).get(kind)
    if span is None:
        raise UnperturbableError(f"Componente '{kind.value}' no localizado en {caption.image_id}")
    positions = token_positions(caption.text)
    start, end = span
    char_start = positions[start][0]
    last_start, char_end = positions[end - 1]
    last_word = caption.text[last_start:char_end]
    suffix = last_word[len(last_word.rstrip(".,;:!?\"'")):]

    new_text = caption.text[:char_start] + new_value + suffix + caption.text[char_end:]
    new_span = (start, start + len(tokenize(new_value)))
    old_value = caption.value_of(kind)

    counterfactual = Caption(
        image_id=caption.image_id,
        text=new_text,
        components=shift_components(caption.components, span, new_span),
    )
    return CaptionEdit(
        reference_caption=caption,
        counterfactual_caption=counterfactual,
        modification_text=modification_text or MODIFICATION_TEMPLATE.format(old=old_value, new=new_value),
        kind=kind,
        changed_span_ref=tuple(span),
        changed_span_cf=new_span,
    )


def replacement_candidates(caption: Caption, kind: ComponentKind, vocabulary: ToyVocabulary,
                           exclude: Iterable[str] = ()) -> List[str]:
    """Valores del vocabulario que producen una edición nueva (sin identidad)."""
    original = caption.value_of(kind)
    excluded = set(exclude)
    return [v for v in vocabulary.values(kind) if v != original and v not in excluded]


def perturb_caption(caption: Caption, kind: ComponentKind, seed: int, backend: PerturberBackend,
                    exclude: Iterable[str] = ()) -> CaptionEdit:
    """
    Edita exactamente el componente `kind` del caption.

    Args:
        exclude: valores de reemplazo ya usados para esta imagen en la corrida

    Raises:
        UnperturbableError: componente no localizable o sin reemplazos disponibles
        EditValidationError: el backend devolvió una edición inválida (raw adjunto)
    """
    caption = parse_components(caption, backend.vocabulary)
    if kind not in (caption.components or {}):
        raise UnperturbableError(f"Componente '{kind.value}' no localizable en {caption.image_id}")

    if backend.kind == PerturberKind.RULE_BASED:
        candidates = replacement_candidates(caption, kind, backend.vocabulary, exclude)
        if not candidates:
            raise UnperturbableError(
                f"Sin reemplazos disponibles para '{kind.value}' en {caption.image_id}"
            )
        new_value = candidates[replacement_index(seed, caption.text, len(candidates))]
        return apply_replacement(caption, kind, new_value)

    return _perturb_external(caption, kind, seed, backend, set(exclude))


def _perturb_external(caption: Caption, kind: ComponentKind, seed: int,
                      backend: PerturberBackend, exclude: Set[str]) -> CaptionEdit:
    client = _client_for(backend.endpoint, backend.timeout, backend.max_retries, backend.max_in_flight)
    body = {
        "caption": caption.text,
        "kind": kind.value,
        "seed": int(seed),
        "avoid": sorted(exclude),
        "instruction": load_prompt(),
        "prompt_version": PROMPT_VERSION,
    }
    payload = client.post_json("perturb", body)
    raw = json.dumps(payload, ensure_ascii=False)

    try:
        edit = parse_llm_edit_response(payload, caption)
    except EditParseError as e:
        if e.code in ("multi_span", "identity_edit"):
            raise EditValidationError(
                f"Edición inválida del LLM para {caption.image_id}: {e}",
                violations=[Violation(e.code, caption.image_id)], raw=raw,
            )
        raise

    violations = validate_edit(edit)
    if edit.kind != kind:
        violations.append(Violation("kind_mismatch", caption.image_id, f"{edit.kind.value} != {kind.value}"))
    expected_span = tuple(caption.components[kind])
    if tuple(edit.changed_span_ref) != expected_span:
        violations.append(Violation(
            "span_mismatch", caption.image_id, f"{tuple(edit.changed_span_ref)} != {expected_span}",
        ))
    if edit.new_value in exclude:
        violations.append(Violation("duplicate_value", caption.image_id, edit.new_value))
    if violations:
        raise EditValidationError(
            f"Edición rechazada para {caption.image_id}: {[v.code for v in violations]}",
            violations=violations, raw=raw,
        )
    return edit


# ==================== RESPUESTAS DEL LLM ====================

class LLMEditResponse(BaseModel):
    """Esquema Pydantic de la respuesta estructurada del servicio de perturbación."""

    model_config = ConfigDict(str_strip_whitespace=True)

    counterfactual: str = Field(..., min_length=1, description="Caption contrafactual completo")
    modification: str = Field(..., min_length=1, description="Texto de modificación t")
    kind: str = Field(..., min_length=1, description="Componente editado: subject, object, ...")


# Tipo de error de pydantic → código de EditParseError
_VALIDATION_CODES = {
    "json_invalid": "malformed_json",
    "json_type": "malformed_json",
    "model_type": "malformed_json",
    "missing": "missing_field",
}


def _changed_opcodes(ref_tokens: Sequence[str], cf_tokens: Sequence[str]):
    matcher = difflib.SequenceMatcher(None, list(ref_tokens), list(cf_tokens), autojunk=False)
    return [op for op in matcher.get_opcodes() if op[0] != "equal"]


def parse_llm_edit_response(raw: Union[str, Mapping], reference: Caption) -> CaptionEdit:
    """
    Interpreta {counterfactual, modification, kind} y calcula los tramos
    cambiados por diff de tokens contra el caption de referencia.

    Raises:
        EditParseError: códigos malformed_json, missing_field, empty_field,
            unknown_kind, identity_edit, multi_span
    """
    raw_text = raw if isinstance(raw, str) else json.dumps(raw, ensure_ascii=False)
    try:
        if isinstance(raw, str):
            response = LLMEditResponse.model_validate_json(raw)
        else:
            response = LLMEditResponse.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        code = _VALIDATION_CODES.get(first["type"], "empty_field")
        where = ".".join(str(part) for part in first["loc"]) or "respuesta"
        raise EditParseError(code, f"{where}: {first['msg']}", raw=raw_text)

    try:
        kind = ComponentKind(response.kind.lower())
    except ValueError:
        raise EditParseError("unknown_kind", f"Tipo de componente desconocido: {response.kind!r}", raw=raw_text)

    cf_text = response.counterfactual
    ref_tokens = tokenize(reference.text)
    cf_tokens = tokenize(cf_text)
    opcodes = _changed_opcodes(ref_tokens, cf_tokens)
    if not opcodes:
        raise EditParseError("identity_edit", "El caption contrafactual es idéntico a la referencia", raw=raw_text)
    if len(opcodes) > 1:
        raise EditParseError("multi_span", f"{len(opcodes)} tramos cambiados", raw=raw_text)

    _, i1, i2, j1, j2 = opcodes[0]
    if i1 == i2 or j1 == j2:
        # Inserción o borrado puro: no hay valor antiguo/nuevo que sustituir
        raise EditParseError("unparseable_diff", "La edición no sustituye ningún tramo", raw=raw_text)

    span_ref, span_cf = (i1, i2), (j1, j2)
    return CaptionEdit(
        reference_caption=reference,
        counterfactual_caption=Caption(
            image_id=reference.image_id,
            text=cf_text,
            components=shift_components(reference.components, span_ref, span_cf),
        ),
        modification_text=response.modification,
        kind=kind,
        changed_span_ref=span_ref,
        changed_span_cf=span_cf,
    )


# ==================== VALIDACIÓN ====================

def validate_edit(edit: CaptionEdit) -> List[Violation]:
    """Política de aceptación de ediciones; lista vacía si la edición es válida."""
    subject = edit.reference_caption.image_id
    violations: List[Violation] = []
    ref_tokens = edit.reference_caption.tokens
    cf_tokens = edit.counterfactual_caption.tokens

    opcodes = _changed_opcodes(ref_tokens, cf_tokens)
    if not opcodes:
        violations.append(Violation("identity_edit", subject))
    elif len(opcodes) > 1:
        violations.append(Violation("multi_span", subject, f"{len(opcodes)} tramos"))
    else:
        _, i1, i2, j1, j2 = opcodes[0]
        (rs, re_), (cs, ce) = edit.changed_span_ref, edit.changed_span_cf
        if not (rs <= i1 and i2 <= re_ and cs <= j1 and j2 <= ce):
            violations.append(Violation(
                "span_mismatch", subject, f"diff ({i1},{i2})/({j1},{j2}) fuera de los tramos declarados"
            ))
        elif ref_tokens[:rs] + ref_tokens[re_:] != cf_tokens[:cs] + cf_tokens[ce:]:
            violations.append(Violation("span_mismatch", subject, "el resto del caption no coincide"))

    replacement_length = edit.changed_span_cf[1] - edit.changed_span_cf[0]
    if replacement_length > LIMITS.MAX_REPLACEMENT_TOKENS:
        violations.append(Violation("span_too_long", subject, f"{replacement_length} tokens"))

    text = edit.modification_text.strip().lower()
    if not text:
        violations.append(Violation("empty_modification", subject))
    elif not any(v.code == "identity_edit" for v in violations):
        if edit.old_value not in text or edit.new_value not in text:
            violations.append(Violation(
                "modification_missing_values", subject,
                f"'{edit.modification_text}' no menciona '{edit.old_value}' y '{edit.new_value}'",
            ))
    return violations


# ==================== MUESTREO Y DEDUPLICACIÓN ====================

def sample_kind(weights: Mapping[ComponentKind, float], rng: np.random.Generator,
                available: Optional[Iterable[ComponentKind]] = None) -> ComponentKind:
    """
    Elige un tipo de componente proporcional a su peso.

    Un tipo con peso 0 nunca se elige.

    Raises:
        UnperturbableError: ningún tipo disponible con peso positivo
    """
    allowed = set(KIND_ORDER if available is None else available)
    kinds = [k for k in KIND_ORDER if k in allowed and weights.get(k, 0.0) > 0]
    if not kinds:
        raise UnperturbableError("Ningún componente disponible con peso positivo")
    p = np.asarray([weights[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=p / p.sum()))]


class EditRegistry:
    """Registro sincronizado (imagen, componente, valor) de una corrida de síntesis."""

    def __init__(self):
        self._lock = threading.Lock()
        self._used: Dict[Tuple[str, ComponentKind], Set[str]] = {}

    def claim(self, image_id: str, kind: ComponentKind, value: str) -> bool:
        """Reserva la combinación; False si ya estaba usada."""
        with self._lock:
            used = self._used.setdefault((image_id, kind), set())
            if value in used:
                return False
            used.add(value)
            return True

    def used(self, image_id: str, kind: ComponentKind) -> FrozenSet[str]:
        with self._lock:
            return frozenset(self._used.get((image_id, kind), ()))

    def __len__(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._used.values())


def available_kinds(caption: Caption, backend: PerturberBackend,
                    registry: Optional[EditRegistry] = None) -> List[ComponentKind]:
    """Componentes localizados que aún admiten una edición nueva."""
    caption = parse_components(caption, backend.vocabulary)
    kinds = []
    for kind in KIND_ORDER:
        if kind not in (caption.components or {}) or backend.kind_weights.get(kind, 0.0) <= 0:
            continue
        if backend.kind == PerturberKind.RULE_BASED:
            used = registry.used(caption.image_id, kind) if registry else ()
            if not replacement_candidates(caption, kind, backend.vocabulary, used):
                continue
        kinds.append(kind)
    return kinds
