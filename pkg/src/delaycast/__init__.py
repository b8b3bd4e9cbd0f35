"""delaycast: Bayesian nowcasting for count data under discrete reporting delay."""

__version__ = "0.1.0"
