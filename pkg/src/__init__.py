"""Source root; the engine package is `sparsederf`."""
