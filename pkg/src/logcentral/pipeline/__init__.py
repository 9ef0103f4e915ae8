from .spec import PipelineSpec, SpecError, load_specs
from .stages import SummaryRecord, parse_line, apply_filter, serialize_record
from .runner import PipelineInstance, PipelineManager, ReceptorClient

__all__ = [
    "PipelineSpec", "SpecError", "load_specs", "SummaryRecord",
    "parse_line", "apply_filter", "serialize_record",
    "PipelineInstance", "PipelineManager", "ReceptorClient",
]
