from __future__ import annotations


class AmbresError(Exception):
    """Raíz de todos los errores esperados del toolkit (el CLI los traduce a código 1)."""


# ==========================
# Esquemas
# ==========================

class SchemaError(AmbresError):
    pass


class MalformedSchema(SchemaError):
    pass


class UnsupportedFeature(SchemaError):
    pass


class DepthExceeded(SchemaError):
    pass


# ==========================
# Autómatas / índice de tokens
# ==========================

class AutomatonError(AmbresError):
    pass


class RegexParseError(AutomatonError):
    pass


class StateBudgetExceeded(AutomatonError):
    pass


class EmptyLanguage(AutomatonError):
    pass


class UnknownState(AutomatonError):
    pass


class DisallowedToken(AutomatonError):
    pass


class UnencodableText(AutomatonError):
    pass


# ==========================
# Decodificación
# ==========================

class DecodeError(AmbresError):
    pass


class NoAllowedToken(DecodeError):
    pass


class BackendFailure(DecodeError):
    pass


class ProtocolError(DecodeError):
    pass


# ==========================
# Mundo simulado
# ==========================

class WorldError(AmbresError):
    pass


class UnmatchableReferent(WorldError):
    pass


class NoDistinguishingAttribute(WorldError):
    pass


# ==========================
# Dataset
# ==========================

class DatasetError(AmbresError):
    pass


class GenerationExhausted(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


# ==========================
# Razonamiento
# ==========================

class ReasoningError(AmbresError):
    pass


class ReasonerFailure(ReasoningError):
    pass


class UnresolvedAmbiguity(ReasoningError):
    pass


class OutOfBounds(ReasoningError):
    pass


class CardinalityMismatch(ReasoningError):
    pass


class PreconditionViolation(ReasoningError):
    pass


# ==========================
# Evaluación
# ==========================

class EvalError(AmbresError):
    pass


class LengthMismatch(EvalError):
    pass


class MissingScene(EvalError):
    pass


class EmptyEvaluation(EvalError):
    pass
