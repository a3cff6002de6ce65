class KaviError(Exception):
    pass


class TensorError(KaviError):
    pass


class NonFiniteError(TensorError):
    pass


class AutogradError(KaviError):
    pass


class GraphError(KaviError):
    pass


class ConvergenceError(GraphError):
    pass


class DataError(KaviError):
    pass


class ConfigError(KaviError):

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.message = message
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

    def __reduce__(self):
        return type(self), (self.message, self.line, self.key)


class TrainingDivergence(KaviError):

    def __init__(self, epoch: int, step: int, breakdown: dict):
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at epoch {epoch} step {step}")

    # rebuilt from its fields when it crosses a process boundary
    def __reduce__(self):
        return type(self), (self.epoch, self.step, self.breakdown)


class ReportError(KaviError):
    pass
