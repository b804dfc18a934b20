"""Open-vocabulary 3D scene graphs: projection, distillation, querying."""

__version__ = "0.1.0"
