"""
Motor de autómatas para generación estructurada.

Flujo:
  patrón regex -> árbol sintáctico -> NFA (Thompson) -> DFA (subconjuntos)
  -> poda de estados muertos/inalcanzables -> índice de tokens por estado.

El índice se construye una sola vez por (DFA, vocabulario) y luego cada
consulta de tokens permitidos es una lectura directa por id de estado.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Set, Tuple, Union

import numpy as np

from services.errors import (
    DisallowedToken,
    EmptyLanguage,
    RegexParseError,
    StateBudgetExceeded,
    UnencodableText,
    UnknownState,
)

logger = logging.getLogger(__name__)


# ==========================
# Configuración/Constantes
# ==========================

# ASCII imprimible: los lenguajes de los esquemas no necesitan más.
DEFAULT_ALPHABET: FrozenSet[str] = frozenset(chr(c) for c in range(0x20, 0x7F))

MAX_DFA_STATES = 100_000

_META = set("\\.^$|?*+()[]{}")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "f": "\f", "v": "\v"}

# Marca de fin de token en el trie del vocabulario
LEAF = -1


# ==========================
# Árbol sintáctico del regex
# ==========================

@dataclass(frozen=True)
class CharSet:
    chars: FrozenSet[str]


@dataclass(frozen=True)
class Empty:
    pass


@dataclass(frozen=True)
class Concat:
    items: Tuple["RegexNode", ...]


@dataclass(frozen=True)
class Alt:
    options: Tuple["RegexNode", ...]


@dataclass(frozen=True)
class Repeat:
    node: "RegexNode"
    min: int
    max: Optional[int]  # None = sin cota


RegexNode = Union[CharSet, Empty, Concat, Alt, Repeat]


def regex_escape(text: str) -> str:
    """Escapa metacaracteres para que `text` se lea como literal."""
    return "".join("\\" + ch if ch in _META else ch for ch in text)


class _RegexParser:
    """Descenso recursivo sobre la gramática soportada.

    alternancia   := concatenación ('|' concatenación)*
    concatenación := repetición*
    repetición    := átomo ('*' | '+' | '?' | '{m}' | '{m,}' | '{m,n}')*
    átomo         := '(' alternancia ')' | '[' clase ']' | '\\' escape | '.' | literal
    """

    def __init__(self, pattern: str, alphabet: FrozenSet[str]):
        self.pattern = pattern
        self.alphabet = alphabet
        self.pos = 0

    def parse(self) -> RegexNode:
        node = self._alternation()
        if self.pos != len(self.pattern):
            raise RegexParseError(
                f"Carácter inesperado {self.pattern[self.pos]!r} en la posición {self.pos}"
            )
        return node

    def _peek(self) -> Optional[str]:
        return self.pattern[self.pos] if self.pos < len(self.pattern) else None

    def _next(self) -> str:
        ch = self._peek()
        if ch is None:
            raise RegexParseError("Fin de patrón inesperado")
        self.pos += 1
        return ch

    def _alternation(self) -> RegexNode:
        options = [self._concatenation()]
        while self._peek() == "|":
            self.pos += 1
            options.append(self._concatenation())
        return options[0] if len(options) == 1 else Alt(tuple(options))

    def _concatenation(self) -> RegexNode:
        items: List[RegexNode] = []
        while True:
            ch = self._peek()
            if ch is None or ch in "|)":
                break
            items.append(self._repetition())
        if not items:
            return Empty()
        return items[0] if len(items) == 1 else Concat(tuple(items))

    def _repetition(self) -> RegexNode:
        node = self._atom()
        while True:
            ch = self._peek()
            if ch == "*":
                self.pos += 1
                node = Repeat(node, 0, None)
            elif ch == "+":
                self.pos += 1
                node = Repeat(node, 1, None)
            elif ch == "?":
                self.pos += 1
                node = Repeat(node, 0, 1)
            elif ch == "{":
                lo, hi = self._bounds()
                node = Repeat(node, lo, hi)
            else:
                return node

    def _number(self) -> Optional[int]:
        start = self.pos
        while self._peek() is not None and self._peek().isdigit():
            self.pos += 1
        if start == self.pos:
            return None
        return int(self.pattern[start:self.pos])

    def _bounds(self) -> Tuple[int, Optional[int]]:
        inicio = self.pos
        self.pos += 1  # '{'
        lo = self._number()
        if lo is None:
            raise RegexParseError(f"Repetición acotada sin mínimo en la posición {inicio}")
        hi: Optional[int] = lo
        if self._peek() == ",":
            self.pos += 1
            hi = self._number()
        if self._peek() != "}":
            raise RegexParseError(f"Repetición acotada sin cerrar en la posición {inicio}")
        self.pos += 1
        if hi is not None and hi < lo:
            raise RegexParseError(f"Repetición {{{lo},{hi}}} con máximo menor que el mínimo")
        return lo, hi

    def _escape(self) -> str:
        ch = self._next()
        if ch in _ESCAPES:
            return _ESCAPES[ch]
        if ch.isalnum():
            raise RegexParseError(f"Escape no soportado '\\{ch}' en la posición {self.pos - 1}")
        return ch

    def _atom(self) -> RegexNode:
        ch = self._next()
        if ch == "(":
            node = self._alternation()
            if self._peek() != ")":
                raise RegexParseError("Grupo sin cerrar")
            self.pos += 1
            return node
        if ch == "[":
            return self._char_class()
        if ch == "\\":
            return CharSet(frozenset(self._escape()))
        if ch == ".":
            return CharSet(self.alphabet)
        if ch in "*+?{":
            raise RegexParseError(f"Cuantificador {ch!r} sin operando en la posición {self.pos - 1}")
        if ch in ")]}":
            raise RegexParseError(f"{ch!r} sin pareja en la posición {self.pos - 1}")
        return CharSet(frozenset(ch))

    def _class_char(self) -> str:
        ch = self._next()
        return self._escape() if ch == "\\" else ch

    def _char_class(self) -> RegexNode:
        negate = False
        if self._peek() == "^":
            negate = True
            self.pos += 1
        members: Set[str] = set()
        while True:
            if self._peek() is None:
                raise RegexParseError("Clase de caracteres sin cerrar")
            if self._peek() == "]":
                self.pos += 1
                break
            lo = self._class_char()
            if self._peek() == "-" and self.pos + 1 < len(self.pattern) and self.pattern[self.pos + 1] != "]":
                self.pos += 1
                hi = self._class_char()
                if ord(hi) < ord(lo):
                    raise RegexParseError(f"Rango inválido {lo}-{hi}")
                members.update(chr(c) for c in range(ord(lo), ord(hi) + 1))
            else:
                members.add(lo)
        if not members:
            raise RegexParseError("Clase de caracteres vacía")
        if negate:
            return CharSet(frozenset(self.alphabet - members))
        return CharSet(frozenset(members))


def parse_regex(pattern: str, alphabet: Optional[Iterable[str]] = None) -> RegexNode:
    alfabeto = frozenset(alphabet) if alphabet is not None else DEFAULT_ALPHABET
    return _RegexParser(pattern, alfabeto).parse()


# ==========================
# NFA (construcción de Thompson)
# ==========================

class _Nfa:
    def __init__(self) -> None:
        # Por estado: lista de (etiqueta, destino); etiqueta None = épsilon
        self.edges: List[List[Tuple[Optional[FrozenSet[str]], int]]] = []

    def new_state(self) -> int:
        self.edges.append([])
        return len(self.edges) - 1

    def add(self, src: int, label: Optional[FrozenSet[str]], dst: int) -> None:
        self.edges[src].append((label, dst))

    def build(self, node: RegexNode) -> Tuple[int, int]:
        if isinstance(node, CharSet):
            s, e = self.new_state(), self.new_state()
            if node.chars:
                self.add(s, node.chars, e)
            return s, e
        if isinstance(node, Empty):
            s, e = self.new_state(), self.new_state()
            self.add(s, None, e)
            return s, e
        if isinstance(node, Concat):
            frags = [self.build(item) for item in node.items]
            for (_, e1), (s2, _) in zip(frags, frags[1:]):
                self.add(e1, None, s2)
            return frags[0][0], frags[-1][1]
        if isinstance(node, Alt):
            s, e = self.new_state(), self.new_state()
            for option in node.options:
                fs, fe = self.build(option)
                self.add(s, None, fs)
                self.add(fe, None, e)
            return s, e
        if isinstance(node, Repeat):
            return self._build_repeat(node)
        raise TypeError(f"Nodo desconocido: {node!r}")

    def _build_repeat(self, node: Repeat) -> Tuple[int, int]:
        start = self.new_state()
        cur = start
        for _ in range(node.min):
            fs, fe = self.build(node.node)
            self.add(cur, None, fs)
            cur = fe
        end = self.new_state()
        if node.max is None:
            fs, fe = self.build(node.node)
            self.add(cur, None, fs)
            self.add(cur, None, end)
            self.add(fe, None, fs)
            self.add(fe, None, end)
            return start, end
        # Opcionales anidados u(u(u)?)?)? : la clausura de cada copia queda pequeña
        for _ in range(node.max - node.min):
            fs, fe = self.build(node.node)
            self.add(cur, None, fs)
            self.add(cur, None, end)
            cur = fe
        self.add(cur, None, end)
        return start, end


# ==========================
# DFA
# ==========================

@dataclass(frozen=True)
class Dfa:
    transitions: Tuple[Dict[str, int], ...]
    start: int
    accepting: FrozenSet[int]

    @property
    def num_states(self) -> int:
        return len(self.transitions)

    def walk(self, state: Optional[int], text: str) -> Optional[int]:
        """Recorre `text` desde `state`; None si alguna transición no existe."""
        for ch in text:
            if state is None:
                return None
            state = self.transitions[state].get(ch)
        return state

    def accepts(self, text: str) -> bool:
        end = self.walk(self.start, text)
        return end is not None and end in self.accepting


def _subset_construction(nfa: _Nfa, start: int, accept: int, max_states: int) -> Dfa:
    important = {
        s for s, edges in enumerate(nfa.edges) if any(label is not None for label, _ in edges)
    }
    important.add(accept)
    closure_cache: Dict[FrozenSet[int], FrozenSet[int]] = {}

    def key_of(states: FrozenSet[int]) -> FrozenSet[int]:
        cached = closure_cache.get(states)
        if cached is not None:
            return cached
        seen = set(states)
        stack = list(states)
        while stack:
            s = stack.pop()
            for label, dst in nfa.edges[s]:
                if label is None and dst not in seen:
                    seen.add(dst)
                    stack.append(dst)
        # Dos clausuras con los mismos estados importantes se comportan igual
        key = frozenset(s for s in seen if s in important)
        closure_cache[states] = key
        return key

    start_key = key_of(frozenset([start]))
    ids: Dict[FrozenSet[int], int] = {start_key: 0}
    order: List[FrozenSet[int]] = [start_key]
    rows: List[Dict[str, int]] = []
    i = 0
    while i < len(order):
        current = order[i]
        i += 1
        moves: Dict[str, Set[int]] = {}
        for s in sorted(current):
            for label, dst in nfa.edges[s]:
                if label is None:
                    continue
                for ch in label:
                    moves.setdefault(ch, set()).add(dst)
        row: Dict[str, int] = {}
        for ch in sorted(moves):
            nxt = key_of(frozenset(moves[ch]))
            if not nxt:
                continue
            if nxt not in ids:
                if len(order) >= max_states:
                    raise StateBudgetExceeded(
                        f"La construcción de subconjuntos superó {max_states} estados"
                    )
                ids[nxt] = len(order)
                order.append(nxt)
            row[ch] = ids[nxt]
        rows.append(row)
    accepting = frozenset(idx for idx, key in enumerate(order) if accept in key)
    return Dfa(transitions=tuple(rows), start=0, accepting=accepting)


def prune_dead_states(dfa: Dfa) -> Dfa:
    """Deja solo estados alcanzables desde el inicio y desde los que se llega a aceptar."""
    reachable = {dfa.start}
    queue = deque([dfa.start])
    while queue:
        s = queue.popleft()
        for nxt in dfa.transitions[s].values():
            if nxt not in reachable:
                reachable.add(nxt)
                queue.append(nxt)

    reverse: Dict[int, Set[int]] = {}
    for s in reachable:
        for nxt in dfa.transitions[s].values():
            reverse.setdefault(nxt, set()).add(s)
    live = {s for s in dfa.accepting if s in reachable}
    queue = deque(live)
    while queue:
        s = queue.popleft()
        for prev in reverse.get(s, ()):
            if prev not in live:
                live.add(prev)
                queue.append(prev)

    if dfa.start not in live:
        raise EmptyLanguage("El lenguaje del autómata es vacío")

    # Renumeración BFS estable desde el inicio
    new_ids: Dict[int, int] = {dfa.start: 0}
    order = [dfa.start]
    queue = deque([dfa.start])
    while queue:
        s = queue.popleft()
        for ch in sorted(dfa.transitions[s]):
            nxt = dfa.transitions[s][ch]
            if nxt in live and nxt not in new_ids:
                new_ids[nxt] = len(order)
                order.append(nxt)
                queue.append(nxt)

    rows = tuple(
        {ch: new_ids[nxt] for ch, nxt in sorted(dfa.transitions[old].items()) if nxt in new_ids}
        for old in order
    )
    accepting = frozenset(new_ids[s] for s in dfa.accepting if s in new_ids)
    if len(order) != dfa.num_states:
        logger.debug("Poda: %s -> %s estados", dfa.num_states, len(order))
    return Dfa(transitions=rows, start=0, accepting=accepting)


def compile_regex(
    pattern: str,
    alphabet: Optional[Iterable[str]] = None,
    max_states: int = MAX_DFA_STATES,
) -> Dfa:
    """Compila `pattern` (semántica anclada) a un DFA podado."""
    alfabeto = frozenset(alphabet) if alphabet is not None else DEFAULT_ALPHABET
    tree = _RegexParser(pattern, alfabeto).parse()
    nfa = _Nfa()
    start, accept = nfa.build(tree)
    dfa = _subset_construction(nfa, start, accept, max_states)
    pruned = prune_dead_states(dfa)
    logger.debug(
        "Regex compilado: %s estados NFA, %s DFA, %s tras poda",
        len(nfa.edges), dfa.num_states, pruned.num_states,
    )
    return pruned


# ==========================
# Vocabulario
# ==========================

@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    eos_id: int
    _ids: Dict[str, int] = field(init=False, repr=False, compare=False)
    _trie: Dict[Any, Any] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} fuera de rango")
        if self.tokens[self.eos_id] != "":
            raise ValueError("El token EOS debe ser la cadena vacía")
        vacios = [i for i, tok in enumerate(self.tokens) if tok == ""]
        if len(vacios) != 1:
            raise ValueError("Debe existir exactamente un token vacío (EOS)")
        ids: Dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in ids:
                raise ValueError(f"Token duplicado: {tok!r}")
            ids[tok] = i
        trie: Dict[Any, Any] = {}
        for i, tok in enumerate(self.tokens):
            if i == self.eos_id:
                continue
            node = trie
            for ch in tok:
                node = node.setdefault(ch, {})
            node[LEAF] = i
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_trie", trie)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def has(self, token: str) -> bool:
        return token in self._ids

    def decode_ids(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids)

    def encode(self, text: str) -> List[int]:
        """Tokenización voraz por coincidencia más larga."""
        out: List[int] = []
        pos = 0
        while pos < len(text):
            node = self._trie
            best: Optional[Tuple[int, int]] = None
            j = pos
            while j < len(text) and text[j] in node:
                node = node[text[j]]
                j += 1
                if LEAF in node:
                    best = (node[LEAF], j)
            if best is None:
                raise UnencodableText(f"No hay token para {text[pos]!r} (posición {pos})")
            out.append(best[0])
            pos = best[1]
        return out


# ==========================
# Índice de tokens
# ==========================

class AllowedTokens(NamedTuple):
    ids: FrozenSet[int]
    eos: bool


@dataclass(frozen=True)
class TokenIndex:
    transitions: Tuple[Dict[int, int], ...]
    eos_allowed: Tuple[bool, ...]
    allowed: Tuple[AllowedTokens, ...]
    # Candidatos ordenados por id (incluye EOS cuando corresponde) para el enmascarado
    candidates: Tuple[np.ndarray, ...] = field(repr=False, compare=False)
    eos_id: int
    start: int

    @property
    def num_states(self) -> int:
        return len(self.transitions)

    @property
    def entry_count(self) -> int:
        return sum(len(row) for row in self.transitions)


def build_token_index(dfa: Dfa, vocab: Vocabulary) -> TokenIndex:
    rows: List[Dict[int, int]] = []
    for state in range(dfa.num_states):
        row: Dict[int, int] = {}
        # DFS conjunto sobre el trie del vocabulario y el DFA: poda prefijos muertos
        stack = [(vocab._trie, state)]
        while stack:
            node, s = stack.pop()
            trans = dfa.transitions[s]
            for ch, child in node.items():
                if ch == LEAF:
                    continue
                nxt = trans.get(ch)
                if nxt is None:
                    continue
                if LEAF in child:
                    row[child[LEAF]] = nxt
                stack.append((child, nxt))
        rows.append(dict(sorted(row.items())))

    eos_allowed = tuple(s in dfa.accepting for s in range(dfa.num_states))
    allowed = tuple(AllowedTokens(frozenset(row), eos) for row, eos in zip(rows, eos_allowed))
    candidates = tuple(
        np.array(sorted(list(row) + ([vocab.eos_id] if eos else [])), dtype=np.int64)
        for row, eos in zip(rows, eos_allowed)
    )
    index = TokenIndex(
        transitions=tuple(rows),
        eos_allowed=eos_allowed,
        allowed=allowed,
        candidates=candidates,
        eos_id=vocab.eos_id,
        start=dfa.start,
    )
    logger.debug(
        "Índice de tokens: %s estados x %s tokens -> %s entradas",
        dfa.num_states, vocab.size, index.entry_count,
    )
    return index


def _check_state(index: TokenIndex, state: int) -> None:
    if not isinstance(state, (int, np.integer)) or not 0 <= state < index.num_states:
        raise UnknownState(f"Estado desconocido: {state!r}")


def allowed_tokens(index: TokenIndex, state: int) -> AllowedTokens:
    _check_state(index, state)
    return index.allowed[state]


def step(index: TokenIndex, state: int, token: int) -> int:
    _check_state(index, state)
    if token == index.eos_id:
        raise DisallowedToken("EOS no avanza el autómata")
    nxt = index.transitions[state].get(token)
    if nxt is None:
        raise DisallowedToken(f"Token {token} no permitido en el estado {state}")
    return nxt


def dump_index(index: TokenIndex) -> str:
    """Volcado de diagnóstico: `state <s>: <tok>-><s'> ...; eos=<bool>`."""
    lines = []
    for s, row in enumerate(index.transitions):
        pares = " ".join(f"{tok}->{nxt}" for tok, nxt in row.items())
        eos = "true" if index.eos_allowed[s] else "false"
        lines.append(f"state {s}: {pares}; eos={eos}")
    return "\n".join(lines) + "\n"
