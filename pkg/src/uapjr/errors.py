"""Exception types raised across the package."""


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual={residual:.3e})")
        self.residual = residual


class DegenerateInputError(NumericalError):
    pass


class StaleTraceError(RuntimeError):
    pass


class IDXFormatError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass
