"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    pass


class NotSplittable(ValueError):
    """Table cannot be halved column-wise without breaking the dim % 4 rule."""


class PlanInvalid(ValueError):
    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        msg = constraint if not detail else f"{constraint}: {detail}"
        super().__init__(msg)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became NaN/inf at epoch {epoch}")


class ConfigurationError(RuntimeError):
    pass
