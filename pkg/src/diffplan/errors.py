"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class NumericFailure(ArithmeticError):
    """A NaN/Inf or an impossible numeric state, tagged with where it happened."""

    def __init__(self, message, layer_id=None, t=None, fingerprint=None):
        super().__init__(message)
        self.layer_id = layer_id
        self.t = t
        self.fingerprint = fingerprint


class BudgetInfeasible(RuntimeError):
    """No plan can satisfy the budget; ``resource`` names the binding limit."""

    def __init__(self, message, resource, required=None):
        super().__init__(message)
        self.resource = resource
        self.required = required
