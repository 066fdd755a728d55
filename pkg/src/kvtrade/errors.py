"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class IntegrityError(RuntimeError):
    """Stored data is internally inconsistent (e.g. corrupted bit packing)."""
