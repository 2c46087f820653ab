"""
Mundo simulado de mesa: bloques y bowls de colores en una grilla, la
semántica de las expresiones referenciales y el render raster determinista.
"""

from __future__ import annotations

import io
import logging
import random
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

from PIL import Image, ImageDraw

from services.errors import NoDistinguishingAttribute, UnmatchableReferent

logger = logging.getLogger(__name__)


GRID = (6, 4)
OBJECT_RANGE = (2, 8)
IMAGE_SIZE = 512

CATEGORIES = ("block", "bowl")
COLORS = ("red", "green", "blue", "yellow", "orange", "purple")
ORDINALS = ("leftmost", "rightmost", "frontmost", "backmost")

# Categorías extra para escenas armadas a mano (tareas tipo "cup on the tray")
SHAPES = {"block": "square", "bowl": "circle", "cup": "circle", "tray": "square"}

PALETTE = {
    "red": (220, 50, 47),
    "green": (0, 160, 70),
    "blue": (38, 110, 220),
    "yellow": (240, 200, 0),
    "orange": (245, 130, 30),
    "purple": (130, 70, 200),
}
BACKGROUND = (205, 200, 190)
SQUARE_SIDE = 48
CIRCLE_RADIUS = 28

TEMPLATES = {
    "pick": "pick up the {0}",
    "move_to": "put the {0} in the {1}",
    "stack": "stack the {0} on the {1}",
}
TEMPLATE_ARITY = {"pick": 1, "move_to": 2, "stack": 2}


# ==========================
# Tipos
# ==========================

@dataclass(frozen=True)
class SceneObject:
    id: str
    category: str
    color: str
    cell: Tuple[int, int]

    def to_json(self) -> Dict[str, Any]:
        return {"id": self.id, "category": self.category, "color": self.color, "cell": list(self.cell)}

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "SceneObject":
        return SceneObject(str(d["id"]), str(d["category"]), str(d["color"]), (int(d["cell"][0]), int(d["cell"][1])))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    grid: Tuple[int, int]
    objects: Tuple[SceneObject, ...]
    seed: int

    def __post_init__(self) -> None:
        cols, rows = self.grid
        lo, hi = OBJECT_RANGE
        if not lo <= len(self.objects) <= hi:
            raise ValueError(f"La escena debe tener entre {lo} y {hi} objetos")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Ids repetidos en la escena {self.scene_id}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError(f"Dos objetos comparten celda en {self.scene_id}")
        for o in self.objects:
            c, r = o.cell
            if not (0 <= c < cols and 0 <= r < rows):
                raise ValueError(f"Celda fuera de la grilla: {o.cell}")
            if o.category not in SHAPES or o.color not in PALETTE:
                raise ValueError(f"Objeto inválido: {o}")

    def get(self, object_id: str) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def to_json(self) -> Dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "grid": list(self.grid),
            "seed": self.seed,
            "objects": [o.to_json() for o in self.objects],
        }

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "Scene":
        return Scene(
            scene_id=str(d["scene_id"]),
            grid=(int(d["grid"][0]), int(d["grid"][1])),
            objects=tuple(SceneObject.from_json(o) for o in d["objects"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ReferringExpression:
    category: str
    color: Optional[str] = None
    ordinal: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        return {"category": self.category, "color": self.color, "ordinal": self.ordinal}

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "ReferringExpression":
        return ReferringExpression(d["category"], d.get("color"), d.get("ordinal"))


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    scene_id: str
    template: str
    text: str
    referents: Tuple[ReferringExpression, ...]
    intended: Tuple[str, ...]
    ambiguous: bool
    split: str

    def __post_init__(self) -> None:
        if len(self.referents) != len(self.intended):
            raise ValueError(f"{self.task_id}: |intended| debe igualar |referents|")
        if self.split not in ("train", "test"):
            raise ValueError(f"Split inválido: {self.split}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "scene_id": self.scene_id,
            "template": self.template,
            "text": self.text,
            "referents": [r.to_json() for r in self.referents],
            "intended": list(self.intended),
            "ambiguous": self.ambiguous,
            "split": self.split,
        }

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "TaskInstance":
        return TaskInstance(
            task_id=str(d["task_id"]),
            scene_id=str(d["scene_id"]),
            template=str(d.get("template", "pick")),
            text=str(d["text"]),
            referents=tuple(ReferringExpression.from_json(r) for r in d["referents"]),
            intended=tuple(str(i) for i in d["intended"]),
            ambiguous=bool(d["ambiguous"]),
            split=str(d["split"]),
        )


# ==========================
# Generación de escenas
# ==========================

def sample_scene(
    grid: Tuple[int, int] = GRID,
    object_range: Tuple[int, int] = OBJECT_RANGE,
    seed: int = 0,
    scene_id: Optional[str] = None,
) -> Scene:
    cols, rows = grid
    lo, hi = object_range
    if lo < 1 or hi < lo or hi > cols * rows:
        raise ValueError(f"Rango de objetos inválido: {object_range}")
    rng = random.Random(seed)
    n = rng.randint(lo, hi)
    cells = rng.sample([(c, r) for r in range(rows) for c in range(cols)], n)
    objects = tuple(
        SceneObject(id=f"o{i}", category=rng.choice(CATEGORIES), color=rng.choice(COLORS), cell=cell)
        for i, cell in enumerate(cells)
    )
    return Scene(scene_id=scene_id or f"scene-{seed}", grid=grid, objects=objects, seed=seed)


# ==========================
# Expresiones referenciales
# ==========================

def _ordinal_key(ordinal: str):
    if ordinal == "leftmost":
        return lambda o: (o.cell[0], o.cell[1])
    if ordinal == "rightmost":
        return lambda o: (-o.cell[0], o.cell[1])
    if ordinal == "frontmost":
        return lambda o: (-o.cell[1], o.cell[0])
    if ordinal == "backmost":
        return lambda o: (o.cell[1], o.cell[0])
    raise ValueError(f"Ordinal desconocido: {ordinal}")


def ordinal_extremum(objects: Sequence[SceneObject], ordinal: str) -> SceneObject:
    return min(objects, key=_ordinal_key(ordinal))


def match_expression(expr: ReferringExpression, scene: Scene) -> FrozenSet[str]:
    cands = [
        o for o in scene.objects
        if o.category == expr.category and (expr.color is None or o.color == expr.color)
    ]
    if expr.ordinal is not None and cands:
        cands = [ordinal_extremum(cands, expr.ordinal)]
    return frozenset(o.id for o in cands)


def matched_objects(expr: ReferringExpression, scene: Scene) -> List[SceneObject]:
    ids = match_expression(expr, scene)
    return [o for o in scene.objects if o.id in ids]


def ambiguity_label(task: TaskInstance, scene: Scene) -> bool:
    ambiguous = False
    for ref in task.referents:
        n = len(match_expression(ref, scene))
        if n == 0:
            raise UnmatchableReferent(f"{task.task_id}: '{realize(ref)}' no coincide con ningún objeto")
        if n >= 2:
            ambiguous = True
    return ambiguous


def realize(expr: ReferringExpression) -> str:
    return " ".join(w for w in (expr.ordinal, expr.color, expr.category) if w)


def render_task_text(template: str, referents: Sequence[ReferringExpression]) -> str:
    if template not in TEMPLATES:
        raise ValueError(f"Plantilla desconocida: {template}")
    if len(referents) != TEMPLATE_ARITY[template]:
        raise ValueError(f"La plantilla {template} requiere {TEMPLATE_ARITY[template]} referentes")
    return TEMPLATES[template].format(*(realize(r) for r in referents))


def normalize(text: str) -> str:
    return " ".join(text.strip().lower().split())


def canonical_name(obj: SceneObject) -> str:
    return f"{obj.color} {obj.category}"


def parse_description(text: str) -> Optional[ReferringExpression]:
    """Inverso de realize(): `[ordinal] [color] categoría`, o None si no calza."""
    words = normalize(text).split()
    if not words or words[-1] not in SHAPES:
        return None
    category = words[-1]
    rest = words[:-1]
    ordinal = rest.pop(0) if rest and rest[0] in ORDINALS else None
    color = rest.pop(0) if rest and rest[0] in PALETTE else None
    if rest:
        return None
    return ReferringExpression(category, color, ordinal)


def apply_clarification(expr: ReferringExpression, answer: str) -> ReferringExpression:
    """Incorpora al referente el color u ordinal mencionado en la respuesta."""
    color, ordinal = expr.color, expr.ordinal
    for word in normalize(answer).replace(",", " ").replace(".", " ").split():
        if word in PALETTE:
            color = word
        elif word in ORDINALS:
            ordinal = word
    return ReferringExpression(expr.category, color, ordinal)


def distinguishing_phrase(target: SceneObject, matched: Sequence[SceneObject]) -> str:
    """Frase mínima que separa `target` del resto del conjunto coincidente."""
    if sum(1 for o in matched if o.color == target.color) == 1:
        return f"the {target.color} one"
    for ordinal in ORDINALS:
        if ordinal_extremum(matched, ordinal).id == target.id:
            return f"the {ordinal} one"
    raise NoDistinguishingAttribute(f"Nada distingue a {target.id} entre {[o.id for o in matched]}")


def is_distinguishable(target: SceneObject, matched: Sequence[SceneObject]) -> bool:
    try:
        distinguishing_phrase(target, matched)
    except NoDistinguishingAttribute:
        return False
    return True


# ==========================
# Render
# ==========================

def object_center(cell: Tuple[int, int]) -> Tuple[int, int]:
    c, r = cell
    return (32 + 80 * c + 24, 64 + 96 * r + 16)


def render_scene(scene: Scene) -> Image.Image:
    img = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    draw = ImageDraw.Draw(img)
    half = SQUARE_SIDE // 2
    for o in scene.objects:
        cx, cy = object_center(o.cell)
        fill = PALETTE[o.color]
        if SHAPES[o.category] == "square":
            draw.rectangle([cx - half, cy - half, cx + half - 1, cy + half - 1], fill=fill)
        else:
            draw.ellipse(
                [cx - CIRCLE_RADIUS, cy - CIRCLE_RADIUS, cx + CIRCLE_RADIUS, cy + CIRCLE_RADIUS],
                fill=fill,
            )
    return img


def render_png_bytes(scene: Scene) -> bytes:
    buf = io.BytesIO()
    render_scene(scene).save(buf, format="PNG")
    return buf.getvalue()
