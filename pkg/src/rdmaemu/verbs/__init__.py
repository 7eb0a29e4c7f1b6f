from .device import Device, mix_key
from .types import (MAX_MESSAGE, MAX_SGE, UD_MAX, Access, CompletionQueue, IllegalTransition,
                    MemoryRegion, Opcode, ProtectionDomain, QPState, QueueFull, QueuePair,
                    ResourceExhausted, Sge, Transport, VerbsError, WCStatus, WorkCompletion,
                    WorkRequest)

__all__ = [
    "Device", "mix_key", "MAX_MESSAGE", "MAX_SGE", "UD_MAX", "Access", "CompletionQueue",
    "IllegalTransition", "MemoryRegion", "Opcode", "ProtectionDomain", "QPState", "QueueFull",
    "QueuePair", "ResourceExhausted", "Sge", "Transport", "VerbsError", "WCStatus",
    "WorkCompletion", "WorkRequest",
]
