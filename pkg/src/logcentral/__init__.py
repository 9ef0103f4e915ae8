"""logcentral: high-throughput log centralization, storage, drill-down and summarization."""

__version__ = "0.1.0"
