from .capture import ExportSpec, byte_tokens, bundled_prompt, capture_cache, export, load_model, make_toy
from .errors import BadExportSpec, ExportError, HookUnavailable, ModelLoadError
from .kvdwriter import DTYPES, LAYOUT_TAG, MAGIC, write_kvd

__version__ = "0.1.0"

__all__ = [
    "ExportSpec",
    "byte_tokens",
    "bundled_prompt",
    "capture_cache",
    "export",
    "load_model",
    "make_toy",
    "BadExportSpec",
    "ExportError",
    "HookUnavailable",
    "ModelLoadError",
    "DTYPES",
    "LAYOUT_TAG",
    "MAGIC",
    "write_kvd",
]
