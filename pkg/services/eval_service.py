"""
Métricas de evaluación: IoU de grounding, precisión / recall / F1 de la
clasificación de ambigüedad y éxito de resolución; reporte en JSON, tabla de
texto y planilla xlsx.
"""

from __future__ import annotations

import json
import logging
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from sklearn.metrics import confusion_matrix

from services.dataset_service import Dataset
from services.decoder import PromptContext
from services.errors import EmptyEvaluation, LengthMismatch, MissingScene
from services.reasoning_service import (
    AmbiguityVerdict,
    OracleReasoner,
    ReasoningTranscript,
    SimulatedUser,
    emit_through_decoder,
    knowno_baseline,
    knowno_options,
    run_episode,
)
from services.schema_compiler import SchemaNode
from services.sim_world import Scene, TaskInstance, match_expression, normalize, parse_description, realize

logger = logging.getLogger(__name__)


ReasonerFactory = Callable[[Scene, TaskInstance], Any]


# ==========================
# Métricas
# ==========================

def set_iou(pred: Iterable[str], gt: Iterable[str]) -> float:
    a, b = set(pred), set(gt)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def f1_from(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    confusion: Tuple[int, int, int, int]  # tp, fp, tn, fn
    flags: Tuple[str, ...] = ()

    @property
    def accuracy(self) -> float:
        tp, fp, tn, fn = self.confusion
        total = tp + fp + tn + fn
        return (tp + tn) / total if total else 0.0


def classification_metrics(preds: Sequence[bool], gts: Sequence[bool]) -> ClassificationMetrics:
    """Ambiguo = clase positiva."""
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predicciones para {len(gts)} etiquetas")
    if preds:
        cm = confusion_matrix([bool(g) for g in gts], [bool(p) for p in preds], labels=[False, True])
        tn, fp, fn, tp = (int(v) for v in cm.ravel())
    else:
        tn = fp = fn = tp = 0
    flags: List[str] = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.append("precision_undefined")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.append("recall_undefined")
    return ClassificationMetrics(precision, recall, f1_from(precision, recall), (tp, fp, tn, fn), tuple(flags))


def ground_truth_descriptions(task: TaskInstance) -> List[str]:
    return list(dict.fromkeys(normalize(realize(r)) for r in task.referents))


def episode_resolved(transcript: ReasoningTranscript, task: TaskInstance, scene: Scene) -> bool:
    """Las descripciones resueltas, re-emparejadas en la escena, dan exactamente los ids reales."""
    ids: Set[str] = set()
    for desc in transcript.resolved:
        expr = parse_description(desc)
        if expr is None:
            return False
        ids |= match_expression(expr, scene)
    return bool(transcript.resolved) and ids == set(task.intended)


def resolution_success(
    transcripts: Sequence[ReasoningTranscript],
    dataset: Dataset,
    denominator: str = "ambiguous",
) -> float:
    """Tasa de éxito; `denominator` = "ambiguous" (por defecto) o "all"."""
    if not transcripts:
        raise EmptyEvaluation("No hay transcripciones para evaluar")
    tasks = {t.task_id: t for t in dataset.tasks}
    scenes = {s.scene_id: s for s in dataset.scenes}
    exitos = 0
    total = 0
    for tr in transcripts:
        task = tasks.get(tr.task_id)
        scene = scenes.get(task.scene_id) if task is not None else None
        if task is None or scene is None:
            raise MissingScene(f"Sin escena para la tarea {tr.task_id}")
        if denominator == "ambiguous" and not task.ambiguous:
            continue
        total += 1
        exitos += int(episode_resolved(tr, task, scene))
    if total == 0:
        raise EmptyEvaluation("Ninguna transcripción corresponde a una tarea ambigua")
    return exitos / total


# ==========================
# Reporte
# ==========================

@dataclass
class EvalReport:
    condition: str
    grounding_iou_mean: Optional[float]
    precision: float
    recall: float
    f1: float
    resolution_success_rate: Optional[float]
    episode_count: int
    confusion: Tuple[int, int, int, int]
    accuracy: float = 0.0
    flags: List[str] = field(default_factory=list)

    def to_json(self) -> Dict[str, Any]:
        tp, fp, tn, fn = self.confusion
        return {
            "condition": self.condition,
            "grounding_iou_mean": self.grounding_iou_mean,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "resolution_success_rate": self.resolution_success_rate,
            "episode_count": self.episode_count,
            "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
            "accuracy": self.accuracy,
            "flags": list(self.flags),
        }


def aggregate(
    transcripts: Sequence[ReasoningTranscript],
    dataset: Dataset,
    condition: str,
    denominator: str = "ambiguous",
) -> EvalReport:
    if not transcripts:
        raise EmptyEvaluation("No hay transcripciones para agregar")
    tasks = {t.task_id: t for t in dataset.tasks}
    filas = []
    for tr in transcripts:
        task = tasks.get(tr.task_id)
        if task is None:
            raise MissingScene(f"Tarea desconocida: {tr.task_id}")
        filas.append({
            "task_id": tr.task_id,
            "gt": task.ambiguous,
            "pred": tr.verdict.ambiguous,
            "iou": set_iou(tr.grounded, ground_truth_descriptions(task)),
        })
    # Pliegue determinista ordenado por task_id
    df = pd.DataFrame(filas).sort_values("task_id").reset_index(drop=True)
    cm = classification_metrics(df["pred"].tolist(), df["gt"].tolist())
    flags = list(cm.flags)
    try:
        res = resolution_success(transcripts, dataset, denominator)
    except EmptyEvaluation:
        res = None
        flags.append("resolution_undefined")
    return EvalReport(
        condition=condition,
        grounding_iou_mean=float(df["iou"].mean()),
        precision=cm.precision,
        recall=cm.recall,
        f1=cm.f1,
        resolution_success_rate=res,
        episode_count=len(df),
        confusion=cm.confusion,
        accuracy=cm.accuracy,
        flags=flags,
    )


# ==========================
# Corridas
# ==========================

def split_tasks(dataset: Dataset, split: str) -> List[TaskInstance]:
    tasks = list(dataset.tasks) if split == "all" else dataset.tasks_in(split)
    return sorted(tasks, key=lambda t: t.task_id)


def fewshot_examples(dataset: Dataset, k: int = 2) -> Dict[str, List[Tuple[str, str]]]:
    """Ejemplos del split de entrenamiento (uno ambiguo y uno claro) con su salida ideal."""
    train = split_tasks(dataset, "train")
    elegidos: List[TaskInstance] = []
    for want in (True, False):
        for t in train:
            if t.ambiguous == want:
                elegidos.append(t)
                break
    elegidos = elegidos[:k]
    out: Dict[str, List[Tuple[str, str]]] = {"grounding": [], "classification": []}
    for t in elegidos:
        oracle = OracleReasoner(dataset.scene_by_id(t.scene_id), t)
        out["grounding"].append((t.text, json.dumps(oracle.grounding_output(), separators=(", ", ": "))))
        out["classification"].append((t.text, json.dumps(oracle.verdict_output().to_json(), separators=(", ", ": "))))
    return out


def run_split(
    dataset: Dataset,
    reasoner_factory: ReasonerFactory,
    user_factory: Callable[[], Any] = SimulatedUser,
    split: str = "test",
    jobs: int = 1,
    fewshot: int = 0,
) -> List[ReasoningTranscript]:
    tasks = split_tasks(dataset, split)
    if not tasks:
        raise EmptyEvaluation(f"El split '{split}' no tiene tareas")
    examples = fewshot_examples(dataset, fewshot) if fewshot > 0 else None

    def episodio(task: TaskInstance) -> ReasoningTranscript:
        scene = dataset.scene_by_id(task.scene_id)
        if scene is None:
            raise MissingScene(f"Sin escena {task.scene_id} para {task.task_id}")
        return run_episode(
            reasoner_factory(scene, task),
            user_factory(),
            task,
            scene,
            image_ref=dataset.image_ref(scene.scene_id),
            examples=examples,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(episodio, tasks))
    return [episodio(t) for t in tasks]


def evaluate(
    dataset: Dataset,
    reasoner_factory: ReasonerFactory,
    user_factory: Callable[[], Any] = SimulatedUser,
    split: str = "test",
    jobs: int = 1,
    condition: str = "oracle",
    fewshot: int = 0,
    denominator: str = "ambiguous",
) -> EvalReport:
    transcripts = run_split(dataset, reasoner_factory, user_factory, split, jobs, fewshot)
    report = aggregate(transcripts, dataset, condition, denominator)
    logger.info("%s: %s episodios, f1=%.3f", condition, report.episode_count, report.f1)
    return report


def evaluate_knowno(
    dataset: Dataset,
    scorer_factory: ReasonerFactory,
    split: str = "test",
    threshold: float = 0.3,
    condition: str = "knowno",
) -> EvalReport:
    tasks = split_tasks(dataset, split)
    if not tasks:
        raise EmptyEvaluation(f"El split '{split}' no tiene tareas")
    preds, gts = [], []
    for task in tasks:
        scene = dataset.scene_by_id(task.scene_id)
        if scene is None:
            raise MissingScene(f"Sin escena {task.scene_id} para {task.task_id}")
        opciones = knowno_options(task, scene)
        preds.append(knowno_baseline(scorer_factory(scene, task), task.text, opciones, threshold, task.task_id))
        gts.append(task.ambiguous)
    cm = classification_metrics(preds, gts)
    return EvalReport(
        condition=condition,
        grounding_iou_mean=None,
        precision=cm.precision,
        recall=cm.recall,
        f1=cm.f1,
        resolution_success_rate=None,
        episode_count=len(tasks),
        confusion=cm.confusion,
        accuracy=cm.accuracy,
        flags=list(cm.flags),
    )


# ==========================
# Ruido calibrado
# ==========================

def flip_decision(seed: int, task_id: str, flip_prob: float) -> bool:
    return random.Random(f"{seed}:{task_id}").random() < flip_prob


class NoisyReasoner:
    """Invierte el booleano de ambigüedad con probabilidad `flip_prob` por tarea."""

    def __init__(self, inner: Any, flip_prob: float, seed: int):
        if not 0.0 <= flip_prob <= 1.0:
            raise ValueError(f"flip_prob debe estar en [0, 1], llegó {flip_prob}")
        self.inner = inner
        self.flip_prob = flip_prob
        self.seed = seed

    @property
    def symbolic(self) -> bool:
        return bool(getattr(self.inner, "symbolic", False))

    def __getattr__(self, name: str) -> Any:
        # points_output, option_scores, ... del reasoner envuelto
        return getattr(self.inner, name)

    def answer(self, ctx: PromptContext, schema: SchemaNode) -> str:
        text = self.inner.answer(ctx, schema)
        if ctx.meta("stage") != "classification":
            return text
        if not flip_decision(self.seed, ctx.meta("task_id"), self.flip_prob):
            return text
        data = json.loads(text)
        grounded = json.loads(ctx.meta("grounded", "[]"))
        ambiguous = not bool(data["ambiguity"])
        if ambiguous:
            objeto = grounded[0] if grounded else "object"
            verdict = AmbiguityVerdict(True, "More than one object may match the task.", f"Which {objeto} do you mean?")
        else:
            verdict = AmbiguityVerdict(False, "Each object in the task is uniquely identified.", "")
        return emit_through_decoder(json.dumps(verdict.to_json(), separators=(", ", ": ")), schema)

    def point(self, ctx: PromptContext) -> str:
        return self.inner.point(ctx)


def noisy_wrapper(r: Any, flip_prob: float, seed: int) -> NoisyReasoner:
    return NoisyReasoner(r, flip_prob, seed)


# ==========================
# Salida
# ==========================

_COLUMNS = ["Condition", "IoU", "Precision", "Recall", "F1", "Resolution"]


def _fmt(v: Optional[float]) -> str:
    return "---" if v is None else f"{v:.2f}"


def report_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            [r.condition, _fmt(r.grounding_iou_mean), _fmt(r.precision), _fmt(r.recall), _fmt(r.f1),
             _fmt(r.resolution_success_rate)]
            for r in reports
        ],
        columns=_COLUMNS,
    )


def format_table(reports: Sequence[EvalReport]) -> str:
    return report_frame(reports).to_string(index=False)


def write_xlsx(reports: Sequence[EvalReport], path: str) -> None:
    wb = Workbook()
    ws = wb.active
    ws.title = "Resultados"

    header_font = Font(bold=True)
    header_fill = PatternFill("solid", fgColor="F1F5F9")
    thin = Side(style="thin", color="E5E7EB")
    border = Border(top=thin, left=thin, right=thin, bottom=thin)

    headers = _COLUMNS + ["Episodes", "TP", "FP", "TN", "FN"]
    for idx, h in enumerate(headers, start=1):
        cell = ws.cell(row=1, column=idx, value=h)
        cell.font = header_font
        cell.fill = header_fill
        cell.border = border
        cell.alignment = Alignment(horizontal="center")

    num_fmt = "0.00"
    for rptr, r in enumerate(reports, start=2):
        tp, fp, tn, fn = r.confusion
        valores = [r.condition, r.grounding_iou_mean, r.precision, r.recall, r.f1,
                   r.resolution_success_rate, r.episode_count, tp, fp, tn, fn]
        for col, v in enumerate(valores, start=1):
            c = ws.cell(row=rptr, column=col, value="---" if v is None else v)
            c.border = border
            if 2 <= col <= 6 and v is not None:
                c.number_format = num_fmt

    widths = [24, 10, 12, 10, 10, 12, 10, 8, 8, 8, 8]
    for i, w in enumerate(widths, start=1):
        ws.column_dimensions[chr(64 + i)].width = w
    ws.freeze_panes = "A2"
    wb.save(path)


def write_report(reports: Sequence[EvalReport], path: str, xlsx_path: Optional[str] = None) -> str:
    """JSON en `path`, tabla de texto al lado (.txt) y planilla opcional."""
    carpeta = os.path.dirname(path)
    if carpeta:
        os.makedirs(carpeta, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"conditions": [r.to_json() for r in reports]}, f, indent=2, sort_keys=True)
        f.write("\n")
    tabla = format_table(reports)
    with open(os.path.splitext(path)[0] + ".txt", "w", encoding="utf-8") as f:
        f.write(tabla + "\n")
    if xlsx_path:
        write_xlsx(reports, xlsx_path)
    return tabla
