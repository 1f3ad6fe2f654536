"""Two-stage DNA/RNA/protein perturbation transformer with a from-scratch
autodiff engine, synthetic planted-truth worlds and interpretability
statistics."""

__version__ = "0.1.0"
