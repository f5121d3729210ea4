"""Lambda-coalescents, their branching-process counterparts and the coupling between them."""

__version__ = "0.1.0"
