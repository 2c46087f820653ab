"""
Pipeline del dataset: escenas + tareas balanceadas (ambiguas / no ambiguas),
split por escena y persistencia en disco con checksum.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Set, Tuple

import pandas as pd

from services.errors import ChecksumMismatch, GenerationExhausted, MissingFile
from services.sim_world import (
    GRID,
    OBJECT_RANGE,
    TEMPLATE_ARITY,
    TEMPLATES,
    ORDINALS,
    ReferringExpression,
    Scene,
    SceneObject,
    TaskInstance,
    ambiguity_label,
    is_distinguishable,
    match_expression,
    matched_objects,
    render_png_bytes,
    render_task_text,
    sample_scene,
)

logger = logging.getLogger(__name__)


DATASET_VERSION = "1"
MAX_SLOT_ATTEMPTS = 200
MAX_SCENE_RETRIES = 10

MANIFEST_FILE = "manifest.json"
SCENES_FILE = "scenes.jsonl"
TASKS_FILE = "tasks.jsonl"
IMAGES_DIR = "images"

# Categorías que admite cada posición de la plantilla
_SLOT_CATEGORIES = {
    "pick": (("block", "bowl"),),
    "move_to": (("block",), ("bowl",)),
    "stack": (("block",), ("block",)),
}


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 40
    tasks_per_scene: int = 20
    ambiguous_fraction: float = 0.5
    split_fraction: float = 0.5
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_scenes < 1 or self.tasks_per_scene < 1:
            raise ValueError("n_scenes y tasks_per_scene deben ser >= 1")
        for nombre in ("ambiguous_fraction", "split_fraction"):
            v = getattr(self, nombre)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{nombre} debe estar en (0, 1), llegó {v}")


@dataclass(frozen=True)
class Dataset:
    scenes: Tuple[Scene, ...]
    tasks: Tuple[TaskInstance, ...]
    manifest: Dict[str, Any]
    root: Optional[str] = field(default=None, compare=False)

    def scene_by_id(self, scene_id: str) -> Optional[Scene]:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        return None

    def task_by_id(self, task_id: str) -> Optional[TaskInstance]:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        return None

    def tasks_in(self, split: str) -> List[TaskInstance]:
        return [t for t in self.tasks if t.split == split]

    def image_ref(self, scene_id: str) -> Optional[str]:
        if self.root is None:
            return None
        return os.path.join(self.root, IMAGES_DIR, f"{scene_id}.png")

    @property
    def checksum(self) -> str:
        return self.manifest["checksum"]


# ==========================
# Semillas derivadas
# ==========================

def derive_seed(master_seed: int, index: int, retry: int = 0) -> int:
    h = hashlib.sha256(f"{master_seed}:{index}:{retry}".encode("ascii")).digest()
    return int.from_bytes(h[:8], "big")


def _slot_is_ambiguous(k: int, n_slots: int, fraction: float) -> bool:
    # Reparte round(n*fraction) slots ambiguos de forma intercalada
    n_amb = round(n_slots * fraction)
    return (k + 1) * n_amb // n_slots > k * n_amb // n_slots


# ==========================
# Muestreo de tareas
# ==========================

def _unique_expressions(target: SceneObject, scene: Scene) -> List[ReferringExpression]:
    opciones = [ReferringExpression(target.category), ReferringExpression(target.category, target.color)]
    for ordinal in ORDINALS:
        opciones.append(ReferringExpression(target.category, None, ordinal))
        opciones.append(ReferringExpression(target.category, target.color, ordinal))
    return [e for e in opciones if match_expression(e, scene) == frozenset({target.id})]


def _ambiguous_expressions(target: SceneObject, scene: Scene) -> List[ReferringExpression]:
    out = []
    for expr in (ReferringExpression(target.category), ReferringExpression(target.category, target.color)):
        matched = matched_objects(expr, scene)
        if len(matched) >= 2 and is_distinguishable(target, matched):
            out.append(expr)
    return out


def _try_task(scene: Scene, want_ambiguous: bool, rng: random.Random) -> Optional[Tuple[str, List[ReferringExpression], List[str]]]:
    template = rng.choice(sorted(TEMPLATES))
    arity = TEMPLATE_ARITY[template]
    amb_pos = rng.randrange(arity) if want_ambiguous else -1
    referents: List[ReferringExpression] = []
    intended: List[str] = []
    for pos, categorias in enumerate(_SLOT_CATEGORIES[template]):
        pool = [o for o in scene.objects if o.category in categorias and o.id not in intended]
        if not pool:
            return None
        target = rng.choice(pool)
        if pos == amb_pos:
            opciones = _ambiguous_expressions(target, scene)
        else:
            opciones = _unique_expressions(target, scene)
        if not opciones:
            return None
        referents.append(rng.choice(opciones))
        intended.append(target.id)
    return template, referents, intended


def _tasks_for_scene(scene: Scene, config: DatasetConfig, seed: int) -> List[TaskInstance]:
    rng = random.Random(f"tasks:{seed}")
    out: List[TaskInstance] = []
    for k in range(config.tasks_per_scene):
        want = _slot_is_ambiguous(k, config.tasks_per_scene, config.ambiguous_fraction)
        for _ in range(MAX_SLOT_ATTEMPTS):
            cand = _try_task(scene, want, rng)
            if cand is None:
                continue
            template, referents, intended = cand
            task = TaskInstance(
                task_id=f"{scene.scene_id}-t{k:02d}",
                scene_id=scene.scene_id,
                template=template,
                text=render_task_text(template, referents),
                referents=tuple(referents),
                intended=tuple(intended),
                ambiguous=want,
                split="train",
            )
            # La etiqueta se recalcula siempre desde la escena
            if ambiguity_label(task, scene) == want:
                out.append(task)
                break
        else:
            raise GenerationExhausted(
                f"{scene.scene_id}: sin tarea {'ambigua' if want else 'no ambigua'} tras {MAX_SLOT_ATTEMPTS} intentos"
            )
    return out


def _generate_scene(config: DatasetConfig, index: int) -> Tuple[Scene, List[TaskInstance]]:
    scene_id = f"s{index:03d}"
    for retry in range(MAX_SCENE_RETRIES + 1):
        seed = derive_seed(config.master_seed, index, retry)
        scene = sample_scene(GRID, OBJECT_RANGE, seed, scene_id=scene_id)
        try:
            tasks = _tasks_for_scene(scene, config, seed)
            return scene, tasks
        except GenerationExhausted as exc:
            logger.debug("Re-muestreando escena %s (intento %s): %s", scene_id, retry + 1, exc)
    raise GenerationExhausted(f"La escena {index} no produjo la mezcla pedida tras {MAX_SCENE_RETRIES} re-muestreos")


# ==========================
# Serialización
# ==========================

def _jsonl_bytes(rows: List[Dict[str, Any]]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode("utf-8")


def _checksum(scenes_bytes: bytes, tasks_bytes: bytes) -> str:
    return hashlib.sha256(scenes_bytes + tasks_bytes).hexdigest()


def _serialize(scenes: Tuple[Scene, ...], tasks: Tuple[TaskInstance, ...]) -> Tuple[bytes, bytes]:
    return _jsonl_bytes([s.to_json() for s in scenes]), _jsonl_bytes([t.to_json() for t in tasks])


def _counts(scenes: Tuple[Scene, ...], tasks: Tuple[TaskInstance, ...]) -> Dict[str, int]:
    return {
        "scenes": len(scenes),
        "tasks": len(tasks),
        "ambiguous": sum(1 for t in tasks if t.ambiguous),
        "train_tasks": sum(1 for t in tasks if t.split == "train"),
        "test_tasks": sum(1 for t in tasks if t.split == "test"),
    }


def generate_dataset(config: DatasetConfig, jobs: int = 1) -> Dataset:
    indices = list(range(config.n_scenes))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            resultados = list(pool.map(lambda i: _generate_scene(config, i), indices))
    else:
        resultados = [_generate_scene(config, i) for i in indices]

    scene_ids = [scene.scene_id for scene, _ in resultados]
    barajados = list(scene_ids)
    random.Random(f"split:{config.master_seed}").shuffle(barajados)
    train: Set[str] = set(barajados[: math.ceil(len(barajados) * config.split_fraction)])

    scenes = tuple(scene for scene, _ in resultados)
    tasks = tuple(
        replace(t, split="train" if t.scene_id in train else "test")
        for _, ts in resultados
        for t in ts
    )
    scenes_bytes, tasks_bytes = _serialize(scenes, tasks)
    manifest = {
        "version": DATASET_VERSION,
        "config": asdict(config),
        "checksum": _checksum(scenes_bytes, tasks_bytes),
        "counts": _counts(scenes, tasks),
    }
    logger.info("Dataset generado: %s", manifest["counts"])
    return Dataset(scenes=scenes, tasks=tasks, manifest=manifest)


def write_dataset(ds: Dataset, directory: str) -> Dataset:
    os.makedirs(os.path.join(directory, IMAGES_DIR), exist_ok=True)
    scenes_bytes, tasks_bytes = _serialize(ds.scenes, ds.tasks)
    with open(os.path.join(directory, SCENES_FILE), "wb") as f:
        f.write(scenes_bytes)
    with open(os.path.join(directory, TASKS_FILE), "wb") as f:
        f.write(tasks_bytes)
    manifest = dict(ds.manifest)
    manifest["checksum"] = _checksum(scenes_bytes, tasks_bytes)
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for scene in ds.scenes:
        with open(os.path.join(directory, IMAGES_DIR, f"{scene.scene_id}.png"), "wb") as f:
            f.write(render_png_bytes(scene))
    return replace(ds, manifest=manifest, root=directory)


def _read_bytes(path: str) -> bytes:
    if not os.path.isfile(path):
        raise MissingFile(f"No existe {path}")
    with open(path, "rb") as f:
        return f.read()


def read_dataset(directory: str) -> Dataset:
    manifest_bytes = _read_bytes(os.path.join(directory, MANIFEST_FILE))
    scenes_bytes = _read_bytes(os.path.join(directory, SCENES_FILE))
    tasks_bytes = _read_bytes(os.path.join(directory, TASKS_FILE))
    manifest = json.loads(manifest_bytes.decode("utf-8"))
    esperado = manifest.get("checksum")
    real = _checksum(scenes_bytes, tasks_bytes)
    if esperado != real:
        raise ChecksumMismatch(f"Checksum {real} no coincide con el manifiesto ({esperado})")
    scenes = tuple(Scene.from_json(json.loads(l)) for l in scenes_bytes.decode("utf-8").splitlines() if l.strip())
    tasks = tuple(TaskInstance.from_json(json.loads(l)) for l in tasks_bytes.decode("utf-8").splitlines() if l.strip())
    return Dataset(scenes=scenes, tasks=tasks, manifest=manifest, root=directory)


# ==========================
# Diagnóstico
# ==========================

def verify_labels(ds: Dataset) -> List[str]:
    """Ids de tareas cuya etiqueta guardada difiere de la recalculada."""
    malas = []
    for t in ds.tasks:
        scene = ds.scene_by_id(t.scene_id)
        if scene is None or ambiguity_label(t, scene) != t.ambiguous:
            malas.append(t.task_id)
    return malas


def dataset_summary(ds: Dataset) -> pd.DataFrame:
    df = pd.DataFrame([{"split": t.split, "ambiguous": t.ambiguous} for t in ds.tasks])
    if df.empty:
        return pd.DataFrame(columns=["ambiguous", "unambiguous", "total"])
    tabla = pd.crosstab(df["split"], df["ambiguous"]).reindex(columns=[True, False], fill_value=0)
    tabla.columns = ["ambiguous", "unambiguous"]
    tabla["total"] = tabla["ambiguous"] + tabla["unambiguous"]
    tabla.loc["total"] = tabla.sum()
    return tabla
