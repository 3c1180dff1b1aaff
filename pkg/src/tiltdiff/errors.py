"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad type, or violated constraint."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TapeError(RuntimeError):
    """Misuse of the autodiff tape (e.g. backward on an empty tape)."""


class TrainingFault(RuntimeError):
    """Non-finite loss, gradient or update during training.

    ``stage`` and ``step`` locate the fault so it can be reported upstream.
    """

    def __init__(self, message, stage=None, step=None):
        self.stage = stage
        self.step = step
        where = []
        if stage is not None:
            where.append(f"stage={stage}")
        if step is not None:
            where.append(f"step={step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class EstimatorFault(RuntimeError):
    """Non-finite output from one of the denoising chains."""

    def __init__(self, message, chain=None):
        self.chain = chain
        super().__init__(message if chain is None else f"{message} (chain={chain})")


class QuadratureError(RuntimeError):
    """Numerical integration returned a non-finite value."""

    def __init__(self, message, interval=None):
        self.interval = interval
        super().__init__(message if interval is None else f"{message} on {interval}")


class ConvexityError(RuntimeError):
    """An objective assumed convex showed a negative second difference."""

    def __init__(self, message, alpha=None, second_difference=None):
        self.alpha = alpha
        self.second_difference = second_difference
        if alpha is not None:
            message = f"{message} (alpha={alpha:.6g}, second difference={second_difference:.3e})"
        super().__init__(message)
