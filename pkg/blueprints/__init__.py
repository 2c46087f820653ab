"""Blueprints del servidor de puntajes."""
