"""Feature-prediction vs perceptual-similarity autoencoder pretraining laboratory."""

__version__ = "0.1.0"
