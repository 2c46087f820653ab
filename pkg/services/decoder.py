"""
Decodificación restringida por el índice de tokens, más los backends que
entregan puntajes por token (mock, guionado y remoto por HTTP).
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import requests

from services.config import get_settings_from_env
from services.errors import BackendFailure, NoAllowedToken, ProtocolError
from services.fsm_engine import (
    Dfa,
    TokenIndex,
    Vocabulary,
    build_token_index,
    compile_regex,
    step,
)
from services.schema_compiler import SchemaNode, compile_schema

logger = logging.getLogger(__name__)


DEFAULT_MAX_TOKENS = 512

# Puntos "(x, y)" separados por un espacio; los límites de imagen se validan aparte
POINT = r"\([0-9]{1,3}, ?[0-9]{1,3}\)"
POINTS_PATTERN = POINT + "( " + POINT + ")*"

# Tokens de varios caracteres del vocabulario por defecto (los de un carácter
# cubren todo el ASCII imprimible, así cualquier texto válido es codificable).
_WORD_TOKENS = [
    '["', '"]', '", "', '","', "[]", '{"', '"}', '": ', '":', '": "', ', "', ", ",
    "true", "false", "ambiguity", "explanation", "clarifying_question",
    "block", "bowl", " block", " bowl", "blocks", "bowls", " blocks", " bowls",
    "red", "green", "blue", "yellow", "orange", "purple",
    " red", " green", " blue", " yellow", " orange", " purple",
    "leftmost", "rightmost", "frontmost", "backmost",
    " leftmost", " rightmost", " frontmost", " backmost",
    "the", " the", "The", " one", " ones", "Which", " which", " do", " you", " mean",
    " is", " are", " in", " on", " of", " and", " or", " to", " up",
    "pick", "put", "stack", " pick", " put", " stack",
    " scene", " object", " objects", " match", " matches", " task",
    " only", " several", " unique", " uniquely", " identified", " described",
    " refers", " there", "There", " ambiguous", " clear", "Each", " each",
    "Object", "Task", "Image", "Answer", "Question", "Options", "Examples",
    "\\n", "\\\"", "tray", "cup", " tray", " cup",
]


@lru_cache(maxsize=1)
def default_vocabulary() -> Vocabulary:
    singles = [chr(c) for c in range(0x20, 0x7F)]
    words = [w for w in dict.fromkeys(_WORD_TOKENS) if len(w) > 1]
    return Vocabulary(tokens=tuple(singles + words + [""]), eos_id=len(singles) + len(words))


# ==========================
# Contexto y resultados
# ==========================

@dataclass(frozen=True)
class PromptContext:
    prompt_text: str
    image_ref: Optional[Union[str, bytes]] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text no puede ser vacío")

    def meta(self, key: str, default: str = "") -> str:
        return self.metadata.get(key, default)


@dataclass(frozen=True)
class DecodePolicy:
    kind: str = "greedy"  # greedy | temperature
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "temperature"):
            raise ValueError(f"Política desconocida: {self.kind}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise ValueError("La temperatura debe ser positiva")


GREEDY = DecodePolicy()


def temperature(t: float, seed: int) -> DecodePolicy:
    return DecodePolicy(kind="temperature", temperature=t, seed=seed)


@dataclass(frozen=True)
class DecodeResult:
    text: str
    token_ids: Tuple[int, ...]
    steps: int
    terminated_by: str  # eos | max_tokens
    final_state: int

    @property
    def complete(self) -> bool:
        return self.terminated_by == "eos"


# ==========================
# Backends
# ==========================

class TokenBackend(Protocol):
    vocab_size: int

    def score(self, prefix: Sequence[int], ctx: PromptContext) -> np.ndarray:
        ...


class MockBackend:
    """Puntajes pseudoaleatorios, deterministas por (semilla, prompt, prefijo)."""

    def __init__(self, seed: int, vocab_size: int):
        self.seed = int(seed)
        self.vocab_size = int(vocab_size)

    def score(self, prefix: Sequence[int], ctx: PromptContext) -> np.ndarray:
        h = hashlib.blake2b(digest_size=16)
        h.update(str(self.seed).encode("ascii"))
        h.update(b"\x00")
        h.update(ctx.prompt_text.encode("utf-8"))
        h.update(b"\x00")
        h.update(np.asarray(list(prefix), dtype=np.int64).tobytes())
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        return rng.standard_normal(self.vocab_size)


class ScriptedBackend:
    """Favorece script[k] en el paso k y EOS al terminar el guion.

    El resto de los tokens decrece con el id, así ante un token ilegal el
    decodificador elige el menor id permitido.
    """

    def __init__(self, script: Sequence[int], vocab_size: int, eos_id: int):
        if not script:
            raise ValueError("El guion no puede ser vacío")
        self.script = [int(t) for t in script]
        self.vocab_size = int(vocab_size)
        self.eos_id = int(eos_id)
        self._base = -np.arange(self.vocab_size, dtype=np.float64) / self.vocab_size

    def score(self, prefix: Sequence[int], ctx: PromptContext) -> np.ndarray:
        k = len(prefix)
        target = self.script[k] if k < len(self.script) else self.eos_id
        scores = self._base.copy()
        scores[target] = 1.0
        return scores


def _image_b64(image_ref: Optional[Union[str, bytes]]) -> Optional[str]:
    if image_ref is None:
        return None
    if isinstance(image_ref, bytes):
        return base64.b64encode(image_ref).decode("ascii")
    if os.path.isfile(image_ref):
        with open(image_ref, "rb") as f:
            return base64.b64encode(f.read()).decode("ascii")
    # Se asume que ya viene como payload en línea
    return image_ref


class HttpBackend:
    """Cliente del protocolo remoto: POST <endpoint>/score."""

    def __init__(self, endpoint: str, vocab_size: int, timeout_s: Optional[float] = None):
        self.endpoint = endpoint.rstrip("/")
        self.vocab_size = int(vocab_size)
        self.timeout_s = timeout_s if timeout_s is not None else get_settings_from_env().http_timeout_s

    def score(self, prefix: Sequence[int], ctx: PromptContext) -> np.ndarray:
        payload = {
            "prompt": ctx.prompt_text,
            "image_b64": _image_b64(ctx.image_ref),
            "prefix_ids": [int(t) for t in prefix],
        }
        url = f"{self.endpoint}/score"
        resp = None
        last_exc: Optional[Exception] = None
        for intento in range(2):
            try:
                resp = requests.post(
                    url,
                    json=payload,
                    headers={"Content-Type": "application/json"},
                    timeout=self.timeout_s,
                )
                break
            except requests.RequestException as exc:
                last_exc = exc
                logger.warning("Fallo de transporte hacia %s (intento %s): %s", url, intento + 1, exc)
        if resp is None:
            raise BackendFailure(f"Backend remoto inalcanzable: {last_exc}")
        if resp.status_code != 200:
            raise BackendFailure(f"Backend remoto respondió {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"Respuesta no es JSON: {exc}") from exc
        scores = data.get("scores") if isinstance(data, dict) else None
        if not isinstance(scores, list) or len(scores) != self.vocab_size:
            got = len(scores) if isinstance(scores, list) else type(scores).__name__
            raise ProtocolError(f"Se esperaban {self.vocab_size} puntajes, llegaron {got}")
        try:
            arr = np.asarray(scores, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"Puntajes no numéricos: {exc}") from exc
        if not np.all(np.isfinite(arr)):
            raise ProtocolError("Puntajes no finitos")
        return arr


def mock_backend(seed: int, vocab_size: Optional[int] = None) -> MockBackend:
    return MockBackend(seed, vocab_size if vocab_size is not None else default_vocabulary().size)


def scripted_backend(script: Sequence[int], vocab: Optional[Vocabulary] = None) -> ScriptedBackend:
    vocab = vocab or default_vocabulary()
    return ScriptedBackend(script, vocab.size, vocab.eos_id)


def http_backend(endpoint: str, vocab_size: Optional[int] = None, timeout_s: Optional[float] = None) -> HttpBackend:
    return HttpBackend(endpoint, vocab_size if vocab_size is not None else default_vocabulary().size, timeout_s)


# ==========================
# Índices cacheados
# ==========================

@lru_cache(maxsize=32)
def dfa_for_pattern(pattern: str) -> Dfa:
    return compile_regex(pattern)


@lru_cache(maxsize=32)
def index_for_pattern(pattern: str, vocab: Vocabulary) -> TokenIndex:
    return build_token_index(dfa_for_pattern(pattern), vocab)


def index_for_schema(schema: SchemaNode, vocab: Vocabulary) -> TokenIndex:
    return index_for_pattern(compile_schema(schema), vocab)


def schema_accepts(schema: SchemaNode, text: str) -> bool:
    return dfa_for_pattern(compile_schema(schema)).accepts(text)


# ==========================
# Bucle de decodificación
# ==========================

def _select(masked: np.ndarray, policy: DecodePolicy, rng: Optional[np.random.Generator]) -> int:
    if policy.kind == "greedy":
        # argmax devuelve la primera ocurrencia: empates -> menor id
        return int(np.argmax(masked))
    logits = masked / policy.temperature
    logits = logits - np.max(logits)
    probs = np.exp(logits)
    probs = probs / probs.sum()
    return int(rng.choice(len(probs), p=probs))


def decode(
    index: TokenIndex,
    vocab: Vocabulary,
    backend: TokenBackend,
    policy: DecodePolicy = GREEDY,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    ctx: Optional[PromptContext] = None,
) -> DecodeResult:
    """Genera texto eligiendo en cada paso solo entre tokens del índice.

    `max_tokens` acota las llamadas al backend (incluida la que elige EOS).
    """
    if max_tokens < 1:
        raise ValueError("max_tokens debe ser >= 1")
    ctx = ctx or PromptContext(prompt_text="-")
    rng = np.random.default_rng(policy.seed) if policy.kind == "temperature" else None
    state = index.start
    ids: List[int] = []
    steps = 0
    while steps < max_tokens:
        cands = index.candidates[state]
        if cands.size == 0:
            raise NoAllowedToken(f"Estado {state} sin tokens permitidos ni EOS")
        try:
            scores = backend.score(ids, ctx)
        except (BackendFailure, ProtocolError):
            raise
        except Exception as exc:
            raise BackendFailure(f"El backend falló: {exc}") from exc
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (vocab.size,) or not np.all(np.isfinite(scores)):
            raise BackendFailure(f"El backend devolvió puntajes inválidos (forma {scores.shape})")
        steps += 1
        masked = np.full(vocab.size, -np.inf)
        masked[cands] = scores[cands]
        chosen = _select(masked, policy, rng)
        if chosen == vocab.eos_id:
            return DecodeResult(vocab.decode_ids(ids), tuple(ids), steps, "eos", state)
        state = step(index, state, chosen)
        ids.append(chosen)
    logger.debug("Decodificación truncada tras %s pasos", steps)
    return DecodeResult(vocab.decode_ids(ids), tuple(ids), steps, "max_tokens", state)


def decode_schema(
    schema: SchemaNode,
    backend: TokenBackend,
    vocab: Optional[Vocabulary] = None,
    policy: DecodePolicy = GREEDY,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    ctx: Optional[PromptContext] = None,
) -> DecodeResult:
    vocab = vocab or default_vocabulary()
    return decode(index_for_schema(schema, vocab), vocab, backend, policy, max_tokens, ctx)


def script_for_text(text: str, vocab: Optional[Vocabulary] = None) -> List[int]:
    return (vocab or default_vocabulary()).encode(text)
