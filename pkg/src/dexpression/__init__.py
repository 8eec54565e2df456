"""DeXpression: a numpy-only convolutional network for facial expression recognition."""

__version__ = "0.1.0"
