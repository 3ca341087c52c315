"""Service boundary: HTTP query API, live channel, command dispatch."""

from .app import SimDriver, create_app, serve_runtime

__all__ = ["SimDriver", "create_app", "serve_runtime"]
