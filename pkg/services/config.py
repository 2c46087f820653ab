from __future__ import annotations

import logging
import os
from dataclasses import dataclass

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Un .env local es opcional; las variables ya exportadas tienen prioridad.
load_dotenv(override=False)

DEFAULT_HTTP_TIMEOUT_MS = 30000
DEFAULT_MAX_TOKENS = 512
DEFAULT_SERVER_SEED = 0
DEFAULT_LOG_LEVEL = "WARNING"


@dataclass(frozen=True)
class Settings:
    http_timeout_ms: int
    max_tokens: int
    server_seed: int
    log_level: str

    @property
    def http_timeout_s(self) -> float:
        return self.http_timeout_ms / 1000.0


def _int_from_env(key: str, default: int) -> int:
    texto = os.environ.get(key)
    if texto is None or texto.strip() == "":
        return default
    try:
        return int(texto)
    except Exception:
        logger.warning("Valor inválido para %s=%r; se usa %s", key, texto, default)
        return default


def get_settings_from_env() -> Settings:
    return Settings(
        http_timeout_ms=_int_from_env("AMBRES_HTTP_TIMEOUT_MS", DEFAULT_HTTP_TIMEOUT_MS),
        max_tokens=_int_from_env("AMBRES_MAX_TOKENS", DEFAULT_MAX_TOKENS),
        server_seed=_int_from_env("AMBRES_SERVER_SEED", DEFAULT_SERVER_SEED),
        log_level=(os.environ.get("AMBRES_LOG_LEVEL") or DEFAULT_LOG_LEVEL).upper(),
    )
