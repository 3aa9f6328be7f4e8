"""Surface-electrode ion trap modelling: fields, pseudopotentials, waveforms,
ion dynamics and heating/lifetime analysis."""

__version__ = "0.1.0"
