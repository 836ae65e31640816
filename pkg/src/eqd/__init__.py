"""Fine-tune a pretrained equation model on one dataset and search its
embedding space for a closed-form law."""

__version__ = "0.1.0"
