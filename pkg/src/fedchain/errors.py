"""Exception types raised across the package."""


class FedChainError(Exception):
    """Base class for every error raised by fedchain."""


# model / numerics
class ShapeError(FedChainError, ValueError):
    pass


class InvalidArchitecture(FedChainError, ValueError):
    pass


class LabelError(FedChainError, ValueError):
    pass


class CacheError(FedChainError):
    pass


class EmptyDataset(FedChainError, ValueError):
    pass


class EmptyInput(FedChainError, ValueError):
    pass


class ConfigError(FedChainError, ValueError):
    pass


# contribution
class ZeroTotalContribution(FedChainError, ArithmeticError):
    pass


class RangeError(FedChainError, ValueError):
    pass


# crypto / wire
class CryptoError(FedChainError):
    pass


class UnwrapError(CryptoError):
    """The wrapped symmetric key could not be recovered with the given key."""


class AuthenticationError(CryptoError):
    """AEAD tag check failed: ciphertext or header was modified."""


class SerializationError(FedChainError, ValueError):
    pass


# ledger
class AlreadyDeployed(FedChainError):
    pass


class NotDeployed(FedChainError):
    pass


class InvalidEventType(FedChainError, ValueError):
    pass


class Unauthorized(FedChainError, PermissionError):
    pass


class IndexOutOfRange(FedChainError, IndexError):
    pass


class UnknownNode(FedChainError, KeyError):
    pass


class LogFormatError(FedChainError, ValueError):
    """An exported ledger log line could not be parsed."""

    def __init__(self, message, line_number=None, height=None):
        super().__init__(message)
        self.line_number = line_number
        self.height = height


# protocol
class PhaseError(FedChainError, RuntimeError):
    pass


class RoundAborted(FedChainError, RuntimeError):
    pass


# data
class FormatError(FedChainError, ValueError):
    pass


class PartitionError(FedChainError, ValueError):
    pass
