"""Continual anomaly detection with spatially-indexed coreset memory.

Core pieces: a binary feature-file format and synthetic generator
(:mod:`cadbench.featstore`), per-location coreset memory banks
(:mod:`cadbench.membank`), neighborhood-restricted scoring with prototype
task routing (:mod:`cadbench.scoring`), continual-learning metrics
(:mod:`cadbench.metrics`), the progressive-drift image protocol
(:mod:`cadbench.drift`), and the end-to-end benchmark harness
(:mod:`cadbench.harness`). A CLI (:mod:`cadbench.cli`) and a FastAPI
service (:mod:`cadbench.service`) expose the pipeline.
"""

__version__ = "0.1.0"
