"""Exception hierarchy shared by every ark module."""


class ArkError(Exception):
    """Base class for all ark errors."""


class DimensionError(ArkError, ValueError):
    pass


class ConfigurationError(ArkError, ValueError):
    pass


class ContractError(ArkError, ValueError):
    pass


class BackwardError(ArkError, RuntimeError):
    pass


class RegistryError(ArkError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(ArkError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(ArkError, ValueError):
    pass


class SchemaError(DataError):
    pass


class LeakError(DataError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        shown = ", ".join(self.ids[:20])
        more = "" if len(self.ids) <= 20 else f" (+{len(self.ids) - 20} more)"
        super().__init__(f"image ids present in pretrain and val/test splits: {shown}{more}")


class DivergenceError(ArkError, FloatingPointError):
    def __init__(self, message, round_index=None, task_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.task_id = task_id


class UndefinedMetricError(ArkError, ValueError):
    pass


class MissingArtifactError(ArkError, FileNotFoundError):
    pass
