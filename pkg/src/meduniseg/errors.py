class ConfigurationError(ValueError):
    """Model / training configuration is inconsistent."""


class RoutingError(LookupError):
    """A task id, modal id, or channel count does not route to any component."""


class ShapeError(ValueError):
    pass


class LoadError(RuntimeError):
    """Checkpoint cannot be loaded into the requested architecture."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss
