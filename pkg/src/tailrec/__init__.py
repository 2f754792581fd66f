"""Sequential recommendation with contextual repair of long-tail item embeddings."""

__version__ = "0.1.0"
