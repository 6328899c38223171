"""Feature exporter: runs images through pretrained vision encoders and
writes the pooled representations in the engine's binary feature format."""

from .encoders import ENCODERS, FetchError, build_encoder
from .export import ExportJob, run_export
from .format import write_feature_file

__all__ = ["ENCODERS", "ExportJob", "FetchError", "build_encoder",
           "run_export", "write_feature_file"]
