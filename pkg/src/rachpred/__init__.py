"""RACH traffic simulation, streaming recurrent prediction and burst detection for mMTC cells."""

__version__ = "0.1.0"
