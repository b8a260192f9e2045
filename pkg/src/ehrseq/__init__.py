"""ehrseq: EHR sequence compiler and multi-label risk workbench."""

__version__ = "0.1.0"
