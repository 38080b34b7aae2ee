"""Exception types shared across the package."""


class ProtoPropError(Exception):
    """Base class for all package errors."""


class ShapeError(ProtoPropError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(ProtoPropError, ValueError):
    """A documented precondition was violated."""


class ConstraintError(ContractError):
    """A seen/unseen split cannot satisfy primitive coverage."""


class NumericalAbort(ProtoPropError, FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        super().__init__(f"non-finite value in loss component '{component}': {value!r}")
