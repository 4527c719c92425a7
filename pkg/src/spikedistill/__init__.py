"""Layer-wise attention distillation from ANN teachers into spiking students."""

__version__ = "0.1.0"
