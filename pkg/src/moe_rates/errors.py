"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation problems exit 2,
indeterminate search verdicts exit 3, anything else exits 1.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class CapabilityError(ValueError):
    """Requested operation exceeds a declared capability bound."""


class IndeterminateError(RuntimeError):
    """A numerical search exhausted its budget without a confident verdict."""
