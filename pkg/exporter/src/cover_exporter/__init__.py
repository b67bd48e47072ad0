"""Bridge from causal language models to line-delimited score traces."""

from .export import ExportError, ExportJob, ExportSummary, export_traces

__all__ = ["ExportError", "ExportJob", "ExportSummary", "export_traces"]
