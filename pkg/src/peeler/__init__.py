"""Open-set few-shot recognition with distance heads and an entropy loss on unseen classes."""

__version__ = "0.1.0"
