"""Exception types raised across the package."""


class PopsimError(Exception):
    """Base class for all package errors."""


# backend
class BackendUnavailable(PopsimError):
    pass


class MalformedResponse(PopsimError):
    pass


class TemplateError(PopsimError):
    pass


class PreconditionError(PopsimError, ValueError):
    pass


# memory
class InvalidItem(PopsimError, ValueError):
    pass


class UnknownDomain(PopsimError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SnapshotError(PopsimError):
    pass


# groups
class TagExtractionFailed(PopsimError):
    pass


class InvalidK(PopsimError, ValueError):
    pass


# simulation
class NoNegativeAvailable(PopsimError):
    pass


# dataset
class DatasetTooSmall(PopsimError):
    pass


class SplitDegenerateWarning(UserWarning):
    pass


# evaluation
class EvalPoolTooSmall(PopsimError):
    pass


class InvalidRank(PopsimError, ValueError):
    pass


# cli / config
class ConfigError(PopsimError):
    pass


class ReplayError(PopsimError):
    pass
