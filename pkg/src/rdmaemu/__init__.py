"""User-space RDMA verbs emulator with bypass and mediated submission paths."""
from .dataplane import AblationFlags, DataplanePath, OpDescriptor, PathMode
from .engine import EngineConfig
from .fabric import Fabric
from .policy import PolicyEngine, PolicySpec
from .sim import CostModel
from .verbs import Access, Opcode, QPState, Sge, Transport, WCStatus, WorkRequest

__all__ = [
    "AblationFlags", "DataplanePath", "OpDescriptor", "PathMode", "EngineConfig", "Fabric",
    "PolicyEngine", "PolicySpec", "CostModel", "Access", "Opcode", "QPState", "Sge", "Transport",
    "WCStatus", "WorkRequest",
]
__version__ = "0.1.0"
