"""Train differentially private random forests and attack them with training-set reconstruction."""

__version__ = "0.1.0"
