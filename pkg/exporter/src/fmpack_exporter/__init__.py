"""FMPack exporter: frozen feature maps from off-the-shelf vision backbones."""

__version__ = "0.1.0"
