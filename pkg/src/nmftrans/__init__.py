"""Piano transcription by nonnegative matrix and tensor factorization."""

__version__ = "0.1.0"
