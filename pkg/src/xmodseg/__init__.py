"""Unpaired MR to CT domain adaptation for abdominal fat segmentation."""

__version__ = "0.1.0"

from xmodseg.errors import ConfigError, FormatError, StageError, ValidationError

__all__ = ["ConfigError", "FormatError", "StageError", "ValidationError", "__version__"]
