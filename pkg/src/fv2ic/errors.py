"""Exception types shared across the package."""

from __future__ import annotations


class Fv2icError(Exception):
    """Base class; ``kind`` is used for the one-line CLI error format."""

    kind = "error"


class ConfigError(Fv2icError, ValueError):
    kind = "config"

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ProtocolError(Fv2icError, RuntimeError):
    kind = "protocol"


class NumericFault(Fv2icError, FloatingPointError):
    kind = "numeric"

    def __init__(self, where: str, message: str = "non-finite values", client_id: int | None = None):
        self.where = where
        self.client_id = client_id
        prefix = f"client {client_id}: " if client_id is not None else ""
        super().__init__(f"{prefix}{where}: {message}")


class ContractViolation(Fv2icError, ValueError):
    kind = "contract"
