"""Exception types shared across the package."""


class PrerankLabError(Exception):
    """Base class for all package errors."""


class ConfigError(PrerankLabError):
    """Invalid or inconsistent configuration."""


class UnknownIdError(PrerankLabError, KeyError):
    """A user/query/item id is not present in the catalog."""


class LabelingError(PrerankLabError):
    """An item outside the request's candidate universe was labeled."""


class EmptyQueryError(PrerankLabError):
    """A query with zero terms reached the query semantic unit."""


class NormalizationError(PrerankLabError):
    """A tower MLP produced the zero vector; unit normalization undefined."""


class NumericalFault(PrerankLabError):
    """Non-finite loss or gradient encountered during training."""


class EvaluationError(PrerankLabError):
    """Metric undefined on the given evaluation set."""
