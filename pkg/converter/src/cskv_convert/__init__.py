"""Checkpoint converter: public model-hub format -> cskv weight container."""

from .container import read_container, write_container
from .export import ExportError, ExportManifest, VerifyReport, export_checkpoint, \
    verify_container

__version__ = "0.1.0"
