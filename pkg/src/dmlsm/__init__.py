"""LSM key-value engine over simulated disaggregated memory and storage."""

from .cluster import Cluster, ClusterConfig
from .engine import Engine, EngineConfig
from .fabric import Fabric, LatencyModel, NodeId, cn, dm, ds
from .memtable import NOT_FOUND, Memtable, ShardConfig
from .workload import WorkloadKind, WorkloadSpec

__version__ = "0.1.0"

__all__ = [
    "Cluster", "ClusterConfig", "Engine", "EngineConfig", "Fabric", "LatencyModel", "Memtable", "NOT_FOUND",
    "NodeId", "ShardConfig", "WorkloadKind", "WorkloadSpec", "cn", "dm", "ds",
]
