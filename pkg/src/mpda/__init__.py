"""Feature-space domain adaptation for multi-agent BEV perception with heterogeneous backbones."""

__version__ = "0.1.0"
