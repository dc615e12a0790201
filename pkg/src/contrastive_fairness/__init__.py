"""De-biasing tabular classifiers with contrastive examples."""

__version__ = "0.1.0"
