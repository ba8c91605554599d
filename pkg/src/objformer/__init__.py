"""Object-guided Transformer for change detection between map rasters and optical imagery."""
