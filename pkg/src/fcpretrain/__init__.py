"""Self-supervised pretraining of Transformer encoders on functional connectomes."""

__version__ = "0.1.0"
