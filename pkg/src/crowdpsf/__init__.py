"""PSF estimation in crowded star fields by convolutional dictionary learning."""

__version__ = "0.1.0"
