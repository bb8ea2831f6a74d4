"""stainforge: region-guided unpaired stain transfer for histopathology tiles."""

__version__ = "0.1.0"
