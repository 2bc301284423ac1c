"""Exception hierarchy shared by every xmla module."""


class XmlaError(Exception):
    """Base class for all library errors."""


class DimensionError(XmlaError, ValueError):
    pass


class RankError(XmlaError, ValueError):
    pass


class GeometryError(XmlaError, ValueError):
    pass


class CacheError(XmlaError, ValueError):
    pass


class SpectrumError(XmlaError, ValueError):
    pass


class VocabError(XmlaError, ValueError):
    pass


class ConfigError(XmlaError, ValueError):
    pass


class DataError(XmlaError, ValueError):
    pass


class KindError(XmlaError, ValueError):
    pass


class ContractError(XmlaError, RuntimeError):
    """A caller broke an API contract (e.g. backward on a non-scalar)."""


class UnsupportedError(XmlaError, NotImplementedError):
    pass


class CheckpointError(XmlaError, IOError):
    pass
