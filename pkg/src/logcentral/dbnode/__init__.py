from .catalog import Catalog, CatalogEntry
from .server import DbNode, DbNodeConfig
from .storage import Cancelled, StorageConfig, StorageEngine
from .throttle import TokenBucket, VirtualClock

__all__ = ["Catalog", "CatalogEntry", "DbNode", "DbNodeConfig", "Cancelled",
           "StorageConfig", "StorageEngine", "TokenBucket", "VirtualClock"]
