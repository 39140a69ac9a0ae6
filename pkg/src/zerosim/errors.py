"""Exception types shared across the simulator.

Every failure mode callers are expected to handle gets its own class so
tests and the CLI can tell bad input apart from corrupted payloads or
malformed exchange plans.
"""


class SimError(Exception):
    """Base class for all zerosim errors."""


class ValidationError(SimError):
    """Input data violates a precondition (non-finite values, bad shapes, ...)."""


class ConfigError(SimError):
    """Configuration object or config file is invalid."""


class IntegrityError(SimError):
    """A wire payload decodes to something impossible (corruption)."""


class PlanError(SimError):
    """An exchange plan is malformed (duplicate messages, unknown ranks)."""


class ProtocolError(SimError):
    """Rank programs diverged: mismatched phase structure in a collective."""
