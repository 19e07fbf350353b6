class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    def __init__(self, message, phase=None, round=None):
        super().__init__(message)
        self.phase = phase
        self.round = round

    def __str__(self):
        where = [f'{name} {value}' for name, value in [('phase', self.phase), ('round', self.round)]
            if value is not None]
        message = super().__str__()
        return f'{message} ({", ".join(where)})' if where else message
