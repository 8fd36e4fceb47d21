"""Drone camera trajectory learning at desk scale.

Subpackages: trajectory ingestion and filtering, dataset construction, an
autoregressive camera-motion transformer, procedural simulation worlds,
closed-loop rollout, and trajectory quality metrics.
"""

__version__ = "0.1.0"
