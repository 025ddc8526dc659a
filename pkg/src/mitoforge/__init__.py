"""Parameter-efficient ViT fine-tuning toolkit for atypical mitotic figure classification."""

__version__ = "0.1.0"
