"""distresskit: synthetic tweet pipeline and annotation-campaign toolkit."""

__version__ = "0.1.0"
