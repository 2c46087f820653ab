from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, List, Tuple, Union

from services.errors import DepthExceeded, MalformedSchema, UnsupportedFeature
from services.fsm_engine import parse_regex, regex_escape

logger = logging.getLogger(__name__)


MAX_DEPTH = 8
MAX_STRING_CONTENT = 256

# Contenido de cadena: imprimible salvo comilla y barra, o uno de los cuatro escapes
STRING_CHAR = r'([^"\\]|\\["\\nt])'
STRING_PATTERN = '"' + STRING_CHAR + "{0," + str(MAX_STRING_CONTENT) + '}"'
BOOLEAN_PATTERN = "(true|false)"

_UNSUPPORTED_TYPES = {"number", "integer", "null"}
_UNION_KEYS = {"anyOf", "oneOf", "allOf", "not", "enum", "const", "$ref"}


# ==========================
# Nodos del esquema
# ==========================

@dataclass(frozen=True)
class StringNode:
    pass


@dataclass(frozen=True)
class BooleanNode:
    pass


@dataclass(frozen=True)
class ArrayNode:
    element: "SchemaNode"


@dataclass(frozen=True)
class ObjectNode:
    fields: Tuple[Tuple[str, "SchemaNode"], ...]

    def __post_init__(self) -> None:
        nombres = [name for name, _ in self.fields]
        if len(set(nombres)) != len(nombres):
            raise MalformedSchema(f"Campos repetidos en el objeto: {nombres}")


SchemaNode = Union[StringNode, BooleanNode, ArrayNode, ObjectNode]


def schema_depth(node: SchemaNode) -> int:
    if isinstance(node, ArrayNode):
        return 1 + schema_depth(node.element)
    if isinstance(node, ObjectNode):
        return 1 + max((schema_depth(v) for _, v in node.fields), default=0)
    return 1


# ==========================
# Lectura del dialecto JSON
# ==========================

def _no_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise MalformedSchema(f"Clave repetida en el esquema: {key!r}")
        out[key] = value
    return out


def _expect_keys(obj: Dict[str, Any], allowed: set, tipo: str) -> None:
    for key in obj:
        if key in _UNION_KEYS:
            raise UnsupportedFeature(f"'{key}' no está soportado")
        if key not in allowed:
            raise UnsupportedFeature(f"Clave '{key}' no soportada para el tipo '{tipo}'")


def _parse_node(obj: Any, depth: int) -> SchemaNode:
    if depth > MAX_DEPTH:
        raise DepthExceeded(f"Profundidad máxima {MAX_DEPTH} superada")
    if not isinstance(obj, dict):
        raise MalformedSchema(f"Se esperaba un objeto de esquema, llegó {type(obj).__name__}")
    for key in _UNION_KEYS:
        if key in obj:
            raise UnsupportedFeature(f"'{key}' no está soportado")
    if "type" not in obj:
        raise MalformedSchema("Falta la clave 'type'")
    tipo = obj["type"]
    if isinstance(tipo, list):
        raise UnsupportedFeature("Uniones de tipos no soportadas")
    if not isinstance(tipo, str):
        raise MalformedSchema("'type' debe ser una cadena")
    if tipo in _UNSUPPORTED_TYPES:
        raise UnsupportedFeature(f"Tipo '{tipo}' no soportado")

    if tipo == "string":
        _expect_keys(obj, {"type"}, tipo)
        return StringNode()
    if tipo == "boolean":
        _expect_keys(obj, {"type"}, tipo)
        return BooleanNode()
    if tipo == "array":
        _expect_keys(obj, {"type", "items"}, tipo)
        if "items" not in obj:
            raise MalformedSchema("Un arreglo requiere 'items'")
        return ArrayNode(_parse_node(obj["items"], depth + 1))
    if tipo == "object":
        _expect_keys(obj, {"type", "properties", "order", "additional"}, tipo)
        if obj.get("additional", False) is not False:
            raise UnsupportedFeature("No se permiten campos adicionales")
        props = obj.get("properties")
        if not isinstance(props, dict):
            raise MalformedSchema("Un objeto requiere 'properties'")
        order = obj.get("order", list(props))
        if not isinstance(order, list) or not all(isinstance(k, str) for k in order):
            raise MalformedSchema("'order' debe ser una lista de nombres")
        if len(set(order)) != len(order) or set(order) != set(props):
            raise MalformedSchema("'order' debe listar exactamente las propiedades declaradas")
        campos = tuple((name, _parse_node(props[name], depth + 1)) for name in order)
        return ObjectNode(campos)
    raise MalformedSchema(f"Tipo desconocido: {tipo!r}")


def parse_schema(text: str) -> SchemaNode:
    try:
        obj = json.loads(text, object_pairs_hook=_no_duplicates)
    except MalformedSchema:
        raise
    except ValueError as exc:
        raise MalformedSchema(f"JSON inválido: {exc}") from exc
    return _parse_node(obj, 1)


# ==========================
# Compilación a regex
# ==========================

def _compile(node: SchemaNode) -> str:
    if isinstance(node, BooleanNode):
        return BOOLEAN_PATTERN
    if isinstance(node, StringNode):
        return STRING_PATTERN
    if isinstance(node, ArrayNode):
        elem = _compile(node.element)
        # [] o [ ?e(, ?e)* ?]
        return r"\[( ?" + elem + "(, ?" + elem + ")* ?)?" + r"\]"
    if isinstance(node, ObjectNode):
        partes = []
        for name, value in node.fields:
            clave = regex_escape(json.dumps(name))
            partes.append(clave + " ?: ?" + _compile(value))
        return r"\{" + " ?, ?".join(partes) + r"\}"
    raise TypeError(f"Nodo desconocido: {node!r}")


@lru_cache(maxsize=64)
def compile_schema(schema: SchemaNode) -> str:
    if schema_depth(schema) > MAX_DEPTH:
        raise DepthExceeded(f"Profundidad máxima {MAX_DEPTH} superada")
    pattern = _compile(schema)
    # El patrón debe leerse con la gramática del motor FSM
    parse_regex(pattern)
    return pattern


def builtin_schemas() -> Tuple[SchemaNode, SchemaNode]:
    grounding = ArrayNode(StringNode())
    ambiguity = ObjectNode((
        ("ambiguity", BooleanNode()),
        ("explanation", StringNode()),
        ("clarifying_question", StringNode()),
    ))
    return grounding, ambiguity


def load_schema_arg(value: str) -> SchemaNode:
    """`grounding`, `ambiguity` o ruta a un archivo con el dialecto JSON."""
    grounding, ambiguity = builtin_schemas()
    if value == "grounding":
        return grounding
    if value == "ambiguity":
        return ambiguity
    with open(value, "r", encoding="utf-8") as f:
        return parse_schema(f.read())
