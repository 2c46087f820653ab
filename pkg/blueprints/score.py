from __future__ import annotations

import base64
import binascii

from flask import Blueprint, current_app, request

from services.decoder import MockBackend, PromptContext, default_vocabulary

bp = Blueprint("score", __name__)


def _backend() -> MockBackend:
    vocab = default_vocabulary()
    return MockBackend(current_app.config["AMBRES_SERVER_SEED"], vocab.size)


@bp.post("/score")
def score():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        return {"ok": False, "error": "Se esperaba un cuerpo JSON"}, 400
    prompt = data.get("prompt")
    prefix = data.get("prefix_ids")
    if not isinstance(prompt, str) or not prompt:
        return {"ok": False, "error": "prompt requerido"}, 400
    if not isinstance(prefix, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in prefix):
        return {"ok": False, "error": "prefix_ids debe ser una lista de enteros"}, 400
    image_b64 = data.get("image_b64")
    if image_b64 is not None:
        try:
            base64.b64decode(image_b64, validate=True)
        except (binascii.Error, TypeError, ValueError):
            return {"ok": False, "error": "image_b64 inválido"}, 400
    scores = _backend().score(prefix, PromptContext(prompt_text=prompt))
    return {"scores": [float(s) for s in scores]}


@bp.get("/vocab")
def vocab():
    v = default_vocabulary()
    return {"tokens": list(v.tokens), "eos_id": v.eos_id}


@bp.get("/__health")
def health():
    return {"ok": True, "vocab_size": default_vocabulary().size, "seed": current_app.config["AMBRES_SERVER_SEED"]}
