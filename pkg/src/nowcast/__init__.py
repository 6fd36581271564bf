"""Desk-scale precipitation nowcasting.

ConvGRU encoder-forecaster with consecutive-hour attention and a rain-map
discriminator, trained on weighted rain-rate losses; ships with a
synthetic advecting-storm simulator, persistence/extrapolation baselines
and CSI/HSS forecast verification.
"""

__version__ = "0.1.0"
