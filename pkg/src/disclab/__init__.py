"""disc-lab: discover spurious concepts via environment-gradient sensitivity,
then cure them with concept-aware mixup, on a synthetic Gaussian benchmark."""

__version__ = "0.1.0"
