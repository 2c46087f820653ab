from __future__ import annotations

import json
from typing import Any, Callable

import pytest

from services.dataset_service import DatasetConfig, generate_dataset
from services.decoder import default_vocabulary
from services.schema_compiler import ArrayNode, BooleanNode, ObjectNode, SchemaNode, StringNode
from services.sim_world import GRID, Scene, SceneObject


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def default_dataset():
    """40 escenas x 20 tareas, semilla 0."""
    return generate_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(DatasetConfig(n_scenes=6, tasks_per_scene=10, master_seed=11))


@pytest.fixture
def three_object_scene() -> Scene:
    # blue block, red block, blue bowl
    return Scene(
        scene_id="t3",
        grid=GRID,
        objects=(
            SceneObject("o0", "block", "blue", (0, 0)),
            SceneObject("o1", "block", "red", (2, 1)),
            SceneObject("o2", "bowl", "blue", (4, 3)),
        ),
        seed=0,
    )


@pytest.fixture
def two_blue_blocks_scene() -> Scene:
    return Scene(
        scene_id="t2",
        grid=GRID,
        objects=(
            SceneObject("a", "block", "blue", (1, 2)),
            SceneObject("b", "block", "blue", (4, 0)),
            SceneObject("c", "bowl", "green", (5, 3)),
        ),
        seed=0,
    )


def _conforms(value: Any, schema: SchemaNode) -> bool:
    if isinstance(schema, StringNode):
        return isinstance(value, str)
    if isinstance(schema, BooleanNode):
        return isinstance(value, bool)
    if isinstance(schema, ArrayNode):
        return isinstance(value, list) and all(_conforms(v, schema.element) for v in value)
    if isinstance(schema, ObjectNode):
        if not isinstance(value, dict) or list(value) != [name for name, _ in schema.fields]:
            return False
        return all(_conforms(value[name], node) for name, node in schema.fields)
    return False


@pytest.fixture(scope="session")
def conforms() -> Callable[[str, SchemaNode], bool]:
    """Oráculo recursivo independiente: el texto es JSON y respeta el esquema."""

    def check(text: str, schema: SchemaNode) -> bool:
        try:
            value = json.loads(text)
        except ValueError:
            return False
        return _conforms(value, schema)

    return check
