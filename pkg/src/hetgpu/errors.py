"""Uniform error taxonomy shared by every layer of the stack."""

from __future__ import annotations


class HetGPUError(Exception):
    """Base class for all errors raised by hetgpu."""

    kind = "Error"


class ValidationError(HetGPUError):
    kind = "Validation"

    def __init__(self, message: str, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class LoweringError(HetGPUError):
    kind = "Lowering"


class LaunchError(HetGPUError):
    kind = "Launch"


class FaultError(HetGPUError):
    """A device-side fault: bad address, deadlock, misaligned access."""

    kind = "Fault"

    def __init__(self, message: str, thread=None, address=None):
        super().__init__(message)
        self.thread = thread
        self.address = address


class DeadlockError(FaultError):
    def __init__(self, message: str, sites=()):
        super().__init__(message)
        self.sites = tuple(sites)


class OOMError(HetGPUError):
    kind = "OOM"


class ProtocolError(HetGPUError):
    kind = "Protocol"


class StateError(HetGPUError):
    kind = "State"
