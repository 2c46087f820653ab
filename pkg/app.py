from __future__ import annotations

import logging
from typing import Any, Dict, Optional

from flask import Flask

from blueprints.score import bp as score_bp
from services.config import get_settings_from_env

logger = logging.getLogger(__name__)


def create_app(overrides: Optional[Dict[str, Any]] = None) -> Flask:
    """Servidor de referencia del protocolo remoto de puntajes (POST /score)."""
    app = Flask(__name__)
    settings = get_settings_from_env()
    app.config["AMBRES_SERVER_SEED"] = settings.server_seed
    if overrides:
        app.config.update(overrides)

    app.register_blueprint(score_bp)
    logger.info("Servidor de puntajes listo (seed=%s)", app.config["AMBRES_SERVER_SEED"])
    return app


app = create_app()


if __name__ == "__main__":
    # Modo desarrollo directo con python app.py; en despliegue: gunicorn app:app
    app.run(debug=True)
