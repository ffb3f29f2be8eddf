"""Point-cloud autoencoder with skip-connection variants, built on a small numpy autodiff core."""

__version__ = "0.1.0"
