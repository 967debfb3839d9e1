"""Hidden-tail resource-consumption attack laboratory on a toy vision-language model."""

__version__ = "0.1.0"
