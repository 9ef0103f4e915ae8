from .queries import DrillQuery, IllegalTransition, QueryStore
from .service import Controller, ControllerConfig

__all__ = ["DrillQuery", "IllegalTransition", "QueryStore", "Controller", "ControllerConfig"]
