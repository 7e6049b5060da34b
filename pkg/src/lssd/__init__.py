"""Language-specific self-distillation for multilingual seq2seq models."""

__version__ = "0.1.0"
