"""Frame-level surgical tool presence detection: ToolNet / EndoNet training and mAP evaluation."""

from toolpresence.data_ingest import (
    TOOLS,
    ToolId,
    FrameRecord,
    DatasetManifest,
    ClassFrequency,
    parse_annotation_file,
    build_manifest,
    class_frequency,
    split_manifest,
)
from toolpresence.errors import (
    ToolkitError,
    AnnotationFormatError,
    ConfigurationError,
    CoverageError,
)

__version__ = "0.1.0"

__all__ = [
    "TOOLS",
    "ToolId",
    "FrameRecord",
    "DatasetManifest",
    "ClassFrequency",
    "parse_annotation_file",
    "build_manifest",
    "class_frequency",
    "split_manifest",
    "ToolkitError",
    "AnnotationFormatError",
    "ConfigurationError",
    "CoverageError",
]
