"""FastAPI service wrapping the core package for long-running scoring."""

from .app import create_app

__all__ = ["create_app"]
