"""Universal table-text pretraining at desk scale."""

__version__ = "1.0.0"
