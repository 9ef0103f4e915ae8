from .store import IndexStore, SummaryIndex
from .service import Receptor, ReceptorConfig

__all__ = ["IndexStore", "SummaryIndex", "Receptor", "ReceptorConfig"]
