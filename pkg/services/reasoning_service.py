"""
Protocolo de razonamiento en tres etapas (grounding, clasificación de
ambigüedad con pregunta aclaratoria, resolución + localización), el usuario
simulado / interactivo y el detector base estilo KnowNo.
"""

from __future__ import annotations

import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, TextIO, Tuple

import numpy as np

from services.config import get_settings_from_env
from services.decoder import (
    GREEDY,
    POINTS_PATTERN,
    DecodePolicy,
    PromptContext,
    TokenBackend,
    decode,
    decode_schema,
    default_vocabulary,
    index_for_pattern,
    index_for_schema,
    schema_accepts,
    scripted_backend,
)
from services.errors import (
    CardinalityMismatch,
    NoDistinguishingAttribute,
    OutOfBounds,
    PreconditionViolation,
    ReasonerFailure,
    UnresolvedAmbiguity,
)
from services.fsm_engine import Vocabulary
from services.schema_compiler import SchemaNode, builtin_schemas
from services.sim_world import (
    IMAGE_SIZE,
    ReferringExpression,
    Scene,
    TaskInstance,
    ambiguity_label,
    apply_clarification,
    canonical_name,
    distinguishing_phrase,
    match_expression,
    matched_objects,
    normalize,
    object_center,
    parse_description,
    realize,
    render_task_text,
)

logger = logging.getLogger(__name__)


GROUNDING_SCHEMA, AMBIGUITY_SCHEMA = builtin_schemas()
KNOWNO_LABELS = ("A", "B", "C", "D")
# Relleno cuando la escena no alcanza para cuatro acciones
KNOWNO_PADDING = ("do nothing", "wait for further instructions", "stop", "ask for help")

PROMPTS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "prompts")
STAGES = ("grounding", "classification", "resolution", "localization", "knowno")

_JSON_SEPARATORS = (", ", ": ")
_POINT_RE = re.compile(r"\((\d{1,3}), ?(\d{1,3})\)")


# ==========================
# Tipos
# ==========================

@dataclass(frozen=True)
class AmbiguityVerdict:
    ambiguous: bool
    explanation: str
    clarifying_question: str

    def to_json(self) -> Dict[str, Any]:
        return {
            "ambiguity": self.ambiguous,
            "explanation": self.explanation,
            "clarifying_question": self.clarifying_question,
        }

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "AmbiguityVerdict":
        return AmbiguityVerdict(bool(d["ambiguity"]), str(d["explanation"]), str(d["clarifying_question"]))


@dataclass
class ReasoningTranscript:
    task_id: str
    grounded: List[str]
    verdict: AmbiguityVerdict
    user_answer: Optional[str]
    resolved: List[str]
    points: List[Tuple[int, int]]
    timings: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_json(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "grounded": list(self.grounded),
            "verdict": self.verdict.to_json(),
            "user_answer": self.user_answer,
            "resolved": list(self.resolved),
            "points": [list(p) for p in self.points],
            "timings": dict(self.timings),
            "warnings": list(self.warnings),
        }

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "ReasoningTranscript":
        return ReasoningTranscript(
            task_id=str(d["task_id"]),
            grounded=[str(x) for x in d["grounded"]],
            verdict=AmbiguityVerdict.from_json(d["verdict"]),
            user_answer=d.get("user_answer"),
            resolved=[str(x) for x in d["resolved"]],
            points=[(int(p[0]), int(p[1])) for p in d.get("points", [])],
            timings={k: float(v) for k, v in d.get("timings", {}).items()},
            warnings=[str(w) for w in d.get("warnings", [])],
        )


def save_transcripts(path: str, transcripts: Sequence[ReasoningTranscript]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in transcripts:
            f.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def load_transcripts(path: str) -> List[ReasoningTranscript]:
    with open(path, "r", encoding="utf-8") as f:
        return [ReasoningTranscript.from_json(json.loads(line)) for line in f if line.strip()]


# ==========================
# Prompts
# ==========================

@lru_cache(maxsize=None)
def load_prompt(stage: str) -> str:
    if stage not in STAGES:
        raise ValueError(f"Etapa desconocida: {stage}")
    with open(os.path.join(PROMPTS_DIR, f"{stage}.txt"), "r", encoding="utf-8") as f:
        return f.read()


def _examples_block(examples: Optional[Sequence[Tuple[str, str]]]) -> str:
    if not examples:
        return ""
    partes = ["Examples:"]
    for task_text, output in examples:
        partes.append(f"Task: {task_text}\nAnswer: {output}")
    return "\n".join(partes) + "\n\n"


def build_prompt(
    stage: str,
    task_text: str,
    objects: Optional[Sequence[str]] = None,
    question: str = "",
    answer: str = "",
    options: Optional[Sequence[str]] = None,
    examples: Optional[Sequence[Tuple[str, str]]] = None,
) -> str:
    opciones = "\n".join(f"{label}) {opt}" for label, opt in zip(KNOWNO_LABELS, options or []))
    return load_prompt(stage).format(
        task=task_text,
        objects=", ".join(objects or []),
        question=question,
        answer=answer,
        options=opciones,
        examples=_examples_block(examples),
    )


def _context(stage: str, prompt: str, image_ref: Any, task_id: str, **extra: str) -> PromptContext:
    meta = {"stage": stage, "task_id": task_id}
    meta.update(extra)
    return PromptContext(prompt_text=prompt, image_ref=image_ref, metadata=meta)


# ==========================
# Reasoners
# ==========================

class Reasoner(Protocol):
    symbolic: bool

    def answer(self, ctx: PromptContext, schema: SchemaNode) -> str:
        ...

    def point(self, ctx: PromptContext) -> str:
        ...


class OptionScorer(Protocol):
    def option_scores(self, ctx: PromptContext, labels: Sequence[str]) -> List[float]:
        ...


def emit_through_decoder(text: str, schema: Optional[SchemaNode] = None, vocab: Optional[Vocabulary] = None) -> str:
    """Pasa `text` por el decodificador restringido con un backend guionado.

    Con schema=None se usa el patrón de puntos.
    """
    vocab = vocab or default_vocabulary()
    index = index_for_schema(schema, vocab) if schema is not None else index_for_pattern(POINTS_PATTERN, vocab)
    script = vocab.encode(text) or [vocab.eos_id]
    result = decode(index, vocab, scripted_backend(script, vocab), GREEDY, len(script) + 1)
    if not result.complete or result.text != text:
        raise ReasonerFailure(f"El texto no es válido bajo el esquema: {text!r} -> {result.text!r}")
    return result.text


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=_JSON_SEPARATORS)


def _first_ambiguous(task: TaskInstance, scene: Scene) -> int:
    for i, ref in enumerate(task.referents):
        if len(match_expression(ref, scene)) >= 2:
            return i
    return -1


class OracleReasoner:
    """Responde cada etapa desde la verdad simbólica de (escena, tarea)."""

    symbolic = True

    def __init__(self, scene: Scene, task: TaskInstance, vocab: Optional[Vocabulary] = None):
        if task.scene_id != scene.scene_id:
            raise PreconditionViolation(f"{task.task_id} no pertenece a {scene.scene_id}")
        self.scene = scene
        self.task = task
        self.vocab = vocab or default_vocabulary()

    # --- salidas simbólicas ---

    def grounding_output(self) -> List[str]:
        return list(dict.fromkeys(normalize(realize(r)) for r in self.task.referents))

    def verdict_output(self) -> AmbiguityVerdict:
        if ambiguity_label(self.task, self.scene):
            ref = self.task.referents[_first_ambiguous(self.task, self.scene)]
            candidatos = [canonical_name(o) for o in matched_objects(ref, self.scene)]
            desc = realize(ref)
            return AmbiguityVerdict(
                True,
                f"The {desc} matches {len(candidatos)} objects in the scene: {', '.join(candidatos)}.",
                f"Which {desc} do you mean?",
            )
        return AmbiguityVerdict(False, "Each object in the task is uniquely identified.", "")

    def resolution_output(self, user_answer: str) -> List[str]:
        refs = list(self.task.referents)
        idx = _first_ambiguous(self.task, self.scene)
        if idx < 0:
            idx = 0
        refs[idx] = apply_clarification(refs[idx], user_answer)
        return list(dict.fromkeys(normalize(realize(r)) for r in refs))

    def points_output(self, descriptions: Sequence[str]) -> List[Tuple[int, int]]:
        out = []
        for desc in descriptions:
            expr = parse_description(desc)
            ids = match_expression(expr, self.scene) if expr else frozenset()
            if len(ids) != 1:
                raise CardinalityMismatch(f"'{desc}' no identifica un único objeto")
            out.append(object_center(self.scene.get(next(iter(ids))).cell))
        return out

    # --- contrato Reasoner ---

    def answer(self, ctx: PromptContext, schema: SchemaNode) -> str:
        stage = ctx.meta("stage")
        if stage == "grounding":
            text = _dumps(self.grounding_output())
        elif stage == "classification":
            text = _dumps(self.verdict_output().to_json())
        elif stage == "resolution":
            text = _dumps(self.resolution_output(ctx.meta("user_answer")))
        else:
            raise ReasonerFailure(f"Etapa sin respuesta simbólica: {stage!r}")
        return emit_through_decoder(text, schema, self.vocab)

    def point(self, ctx: PromptContext) -> str:
        descs = json.loads(ctx.meta("objects", "[]"))
        text = " ".join(f"({x}, {y})" for x, y in self.points_output(descs))
        return emit_through_decoder(text, None, self.vocab)


class DecoderReasoner:
    """Reasoner respaldado por un TokenBackend a través del decodificador."""

    symbolic = False

    def __init__(
        self,
        backend: TokenBackend,
        vocab: Optional[Vocabulary] = None,
        policy: DecodePolicy = GREEDY,
        max_tokens: Optional[int] = None,
    ):
        self.backend = backend
        self.vocab = vocab or default_vocabulary()
        self.policy = policy
        self.max_tokens = max_tokens or get_settings_from_env().max_tokens

    def answer(self, ctx: PromptContext, schema: SchemaNode) -> str:
        result = decode_schema(schema, self.backend, self.vocab, self.policy, self.max_tokens, ctx)
        if not result.complete:
            raise ReasonerFailure(f"Salida truncada tras {result.steps} pasos ({ctx.meta('stage')})")
        return result.text

    def point(self, ctx: PromptContext) -> str:
        index = index_for_pattern(POINTS_PATTERN, self.vocab)
        result = decode(index, self.vocab, self.backend, self.policy, self.max_tokens, ctx)
        if not result.complete:
            raise ReasonerFailure(f"Puntos truncados tras {result.steps} pasos")
        return result.text

    def option_scores(self, ctx: PromptContext, labels: Sequence[str]) -> List[float]:
        scores = self.backend.score([], ctx)
        return [float(scores[self.vocab.id_of(label)]) for label in labels]


class ScriptedReasoner:
    """Respuestas fijas por etapa, validadas por el decodificador."""

    symbolic = False

    def __init__(self, responses: Dict[str, str], vocab: Optional[Vocabulary] = None):
        self.responses = dict(responses)
        self.vocab = vocab or default_vocabulary()

    def answer(self, ctx: PromptContext, schema: SchemaNode) -> str:
        stage = ctx.meta("stage")
        if stage not in self.responses:
            raise ReasonerFailure(f"Sin respuesta guionada para la etapa {stage!r}")
        return emit_through_decoder(self.responses[stage], schema, self.vocab)

    def point(self, ctx: PromptContext) -> str:
        if "localization" not in self.responses:
            raise ReasonerFailure("Sin respuesta guionada para la localización")
        return emit_through_decoder(self.responses["localization"], None, self.vocab)


def oracle_reasoner(scene: Scene, task: TaskInstance) -> OracleReasoner:
    return OracleReasoner(scene, task)


# ==========================
# Usuarios
# ==========================

def simulate_user_answer(task: TaskInstance, scene: Scene, verdict: AmbiguityVerdict) -> str:
    if not verdict.ambiguous:
        raise PreconditionViolation("El usuario solo responde cuando el veredicto es ambiguo")
    idx = _first_ambiguous(task, scene)
    if idx < 0:
        idx = 0
    target = scene.get(task.intended[idx])
    matched = matched_objects(task.referents[idx], scene)
    try:
        return distinguishing_phrase(target, matched)
    except NoDistinguishingAttribute:
        logger.error("Objeto %s indistinguible en %s", target.id, task.task_id)
        raise


class SimulatedUser:
    def answer(self, task: TaskInstance, scene: Scene, verdict: AmbiguityVerdict) -> str:
        return simulate_user_answer(task, scene, verdict)


class InteractiveUser:
    """Muestra la pregunta en la terminal y lee una línea como respuesta."""

    def __init__(self, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None):
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout

    def answer(self, task: TaskInstance, scene: Scene, verdict: AmbiguityVerdict) -> str:
        self.stdout.write(f"[?] {verdict.clarifying_question}\n> ")
        self.stdout.flush()
        line = self.stdin.readline()
        return line.strip()


# ==========================
# Etapas
# ==========================

def _parse_json(text: str, schema: SchemaNode, r: Any) -> Any:
    if getattr(r, "symbolic", False) and not schema_accepts(schema, text):
        raise ReasonerFailure(f"Salida simbólica fuera del esquema: {text!r}")
    try:
        return json.loads(text)
    except ValueError as exc:
        raise ReasonerFailure(f"Salida no parseable: {exc}") from exc


def _normalized_unique(items: Sequence[str]) -> List[str]:
    return list(dict.fromkeys(normalize(x) for x in items if normalize(x)))


def ground_task_objects(
    r: Reasoner,
    image_ref: Any,
    task_text: str,
    task_id: str = "",
    examples: Optional[Sequence[Tuple[str, str]]] = None,
) -> List[str]:
    prompt = build_prompt("grounding", task_text, examples=examples)
    raw = r.answer(_context("grounding", prompt, image_ref, task_id), GROUNDING_SCHEMA)
    data = _parse_json(raw, GROUNDING_SCHEMA, r)
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise ReasonerFailure(f"Se esperaba un arreglo de cadenas: {raw!r}")
    return _normalized_unique(data)


def verdict_warnings(verdict: AmbiguityVerdict, grounded: Sequence[str]) -> List[str]:
    avisos = []
    if not verdict.ambiguous and verdict.clarifying_question:
        avisos.append("contrato: clarifying_question no vacía con ambiguity=false")
    if not verdict.explanation:
        avisos.append("contrato: explanation vacía")
    if verdict.ambiguous and grounded:
        q = normalize(verdict.clarifying_question)
        if not any(g in q for g in grounded):
            avisos.append("la pregunta no menciona ningún objeto del grounding")
    return avisos


def classify_ambiguity(
    r: Reasoner,
    image_ref: Any,
    task_text: str,
    grounded: Sequence[str],
    task_id: str = "",
    examples: Optional[Sequence[Tuple[str, str]]] = None,
) -> AmbiguityVerdict:
    prompt = build_prompt("classification", task_text, objects=grounded, examples=examples)
    ctx = _context("classification", prompt, image_ref, task_id, grounded=_dumps(list(grounded)))
    raw = r.answer(ctx, AMBIGUITY_SCHEMA)
    data = _parse_json(raw, AMBIGUITY_SCHEMA, r)
    try:
        verdict = AmbiguityVerdict.from_json(data)
    except (KeyError, TypeError) as exc:
        raise ReasonerFailure(f"Registro de ambigüedad inválido: {raw!r}") from exc
    for aviso in verdict_warnings(verdict, grounded):
        logger.warning("%s: %s", task_id or "-", aviso)
    return verdict


def unresolved_descriptions(resolved: Sequence[str], scene: Scene) -> List[str]:
    malas = []
    for desc in resolved:
        expr = parse_description(desc)
        if expr is None or len(match_expression(expr, scene)) != 1:
            malas.append(desc)
    return malas


def resolve(
    r: Reasoner,
    image_ref: Any,
    task_text: str,
    verdict: AmbiguityVerdict,
    user_answer: Optional[str],
    grounded: Optional[Sequence[str]] = None,
    task_id: str = "",
    scene: Optional[Scene] = None,
    examples: Optional[Sequence[Tuple[str, str]]] = None,
) -> List[str]:
    if not verdict.ambiguous:
        return list(grounded or [])
    if user_answer is None:
        raise PreconditionViolation("Veredicto ambiguo sin respuesta del usuario")
    prompt = build_prompt(
        "resolution", task_text, question=verdict.clarifying_question, answer=user_answer, examples=examples
    )
    ctx = _context("resolution", prompt, image_ref, task_id, user_answer=user_answer)
    raw = r.answer(ctx, GROUNDING_SCHEMA)
    data = _parse_json(raw, GROUNDING_SCHEMA, r)
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise ReasonerFailure(f"Se esperaba un arreglo de cadenas: {raw!r}")
    resolved = _normalized_unique(data)
    if scene is not None and getattr(r, "symbolic", False):
        malas = unresolved_descriptions(resolved, scene)
        if malas:
            raise UnresolvedAmbiguity(f"Sigue ambiguo tras la aclaración: {malas}")
    return resolved


def parse_points(text: str) -> List[Tuple[int, int]]:
    return [(int(x), int(y)) for x, y in _POINT_RE.findall(text)]


def locate_objects(
    r: Reasoner,
    image_ref: Any,
    scene: Optional[Scene],
    resolved: Sequence[str],
    task_id: str = "",
) -> List[Tuple[int, int]]:
    if not resolved:
        return []
    if getattr(r, "symbolic", False) and scene is not None:
        points = r.points_output(resolved)
    else:
        prompt = build_prompt("localization", "", objects=resolved)
        ctx = _context("localization", prompt, image_ref, task_id, objects=_dumps(list(resolved)))
        points = parse_points(r.point(ctx))
    for x, y in points:
        if not (0 <= x < IMAGE_SIZE and 0 <= y < IMAGE_SIZE):
            raise OutOfBounds(f"Punto ({x}, {y}) fuera de la imagen {IMAGE_SIZE}x{IMAGE_SIZE}")
    if len(points) != len(resolved):
        raise CardinalityMismatch(f"{len(points)} puntos para {len(resolved)} objetos")
    return points


# ==========================
# Episodio completo
# ==========================

def run_episode(
    r: Reasoner,
    user: Any,
    task: TaskInstance,
    scene: Scene,
    image_ref: Any = None,
    examples: Optional[Dict[str, Sequence[Tuple[str, str]]]] = None,
    observer: Optional[Callable[[str, Any], None]] = None,
) -> ReasoningTranscript:
    """ground -> classify -> (pregunta) -> resolve -> locate.

    Los errores semánticos del reasoner quedan en `warnings`; solo se propagan
    fallas de transporte o de contrato.
    """
    if task.scene_id != scene.scene_id:
        raise PreconditionViolation(f"{task.task_id} no pertenece a {scene.scene_id}")
    examples = examples or {}
    notify = observer or (lambda stage, value: None)
    timings: Dict[str, float] = {}
    warnings: List[str] = []

    t0 = time.perf_counter()
    grounded = ground_task_objects(r, image_ref, task.text, task.task_id, examples.get("grounding"))
    timings["grounding"] = time.perf_counter() - t0
    notify("grounding", grounded)

    t0 = time.perf_counter()
    verdict = classify_ambiguity(r, image_ref, task.text, grounded, task.task_id, examples.get("classification"))
    timings["classification"] = time.perf_counter() - t0
    warnings.extend(verdict_warnings(verdict, grounded))
    notify("classification", verdict)

    user_answer: Optional[str] = None
    if verdict.ambiguous:
        user_answer = user.answer(task, scene, verdict)
        t0 = time.perf_counter()
        resolved = resolve(r, image_ref, task.text, verdict, user_answer, grounded, task.task_id)
        timings["resolution"] = time.perf_counter() - t0
    else:
        resolved = list(grounded)
    notify("resolution", resolved)

    malas = unresolved_descriptions(resolved, scene)
    if malas:
        warnings.append(f"UnresolvedAmbiguity: {malas}")

    points: List[Tuple[int, int]] = []
    t0 = time.perf_counter()
    try:
        points = locate_objects(r, image_ref, scene, resolved, task.task_id)
    except (OutOfBounds, CardinalityMismatch) as exc:
        warnings.append(f"{type(exc).__name__}: {exc}")
    timings["localization"] = time.perf_counter() - t0
    notify("localization", points)

    return ReasoningTranscript(
        task_id=task.task_id,
        grounded=grounded,
        verdict=verdict,
        user_answer=user_answer,
        resolved=resolved,
        points=points,
        timings=timings,
        warnings=warnings,
    )


# ==========================
# KnowNo
# ==========================

def knowno_candidates(task: TaskInstance, scene: Scene) -> List[Tuple[str, bool]]:
    """Cuatro acciones (texto, consistente con la tarea) desde la lista real de objetos."""
    idx = _first_ambiguous(task, scene)
    if idx < 0:
        idx = 0
    ref = task.referents[idx]
    matched = matched_objects(ref, scene)

    def accion(expr: ReferringExpression) -> str:
        refs = list(task.referents)
        refs[idx] = expr
        return render_task_text(task.template, refs)

    out: List[Tuple[str, bool]] = []
    for obj in matched[: len(KNOWNO_LABELS)]:
        try:
            expr = apply_clarification(ref, distinguishing_phrase(obj, matched))
        except NoDistinguishingAttribute:
            expr = ReferringExpression(obj.category, obj.color)
        out.append((accion(expr), True))
    usados = {o.id for o in matched}
    for obj in scene.objects:
        if len(out) >= len(KNOWNO_LABELS):
            break
        if obj.id in usados:
            continue
        text = accion(ReferringExpression(obj.category, obj.color))
        if text not in {t for t, _ in out}:
            out.append((text, False))
    while len(out) < len(KNOWNO_LABELS):
        out.append((KNOWNO_PADDING[len(out)], False))
    return out


def knowno_options(task: TaskInstance, scene: Scene) -> List[str]:
    return [text for text, _ in knowno_candidates(task, scene)]


class OracleOptionScorer:
    """Puntaje alto para las opciones consistentes con la tarea, bajo para el resto."""

    def __init__(self, task: TaskInstance, scene: Scene, high: float = 2.0, low: float = -2.0):
        self.flags = [ok for _, ok in knowno_candidates(task, scene)]
        self.high = high
        self.low = low

    def option_scores(self, ctx: PromptContext, labels: Sequence[str]) -> List[float]:
        return [self.high if ok else self.low for ok in self.flags[: len(labels)]]


class FixedOptionScorer:
    def __init__(self, scores: Sequence[float]):
        self.scores = [float(s) for s in scores]

    def option_scores(self, ctx: PromptContext, labels: Sequence[str]) -> List[float]:
        return list(self.scores)


def softmax(scores: Sequence[float]) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    arr = np.exp(arr - np.max(arr))
    return arr / arr.sum()


def knowno_from_scores(scores: Sequence[float], threshold: float) -> bool:
    return int(np.sum(softmax(scores) > threshold)) >= 2


def knowno_baseline(
    r: OptionScorer,
    task_text: str,
    options: Sequence[str],
    threshold: float,
    task_id: str = "",
    image_ref: Any = None,
) -> bool:
    if len(options) != len(KNOWNO_LABELS):
        raise PreconditionViolation(f"Se requieren exactamente 4 opciones, llegaron {len(options)}")
    if not 0.0 < threshold < 1.0:
        raise PreconditionViolation(f"El umbral debe estar en (0, 1), llegó {threshold}")
    prompt = build_prompt("knowno", task_text, options=options)
    ctx = _context("knowno", prompt, image_ref, task_id)
    scores = r.option_scores(ctx, list(KNOWNO_LABELS))
    return knowno_from_scores(scores, threshold)
