from .service import Feeder, FeederConfig

__all__ = ["Feeder", "FeederConfig"]
