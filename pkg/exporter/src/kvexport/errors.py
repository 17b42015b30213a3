class ExportError(Exception):
    """Base class for exporter failures."""


class ModelLoadError(ExportError):
    """The model path could not be loaded."""


class HookUnavailable(ExportError):
    """The architecture exposes no pre-rotary capture point."""


class BadExportSpec(ExportError):
    """The export request is internally inconsistent."""
