"""MAE-CT: masked autoencoder pre-training followed by NNCLR contrastive tuning."""

__version__ = "0.1.0"
