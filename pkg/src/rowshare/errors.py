"""Exception hierarchy shared by every layer of the package.

Each exception carries a stable ``category`` string.  The wire codec uses the
category to encode errors into responses and to rebuild the right exception
class on the client side, and the CLI maps categories to exit codes, so the
set of categories is part of the public protocol: renaming one is a breaking
change.
"""

from __future__ import annotations


class RowShareError(Exception):
    """Base class for every error raised by this package."""

    category = "error"


# --- crypto ---------------------------------------------------------------

class CryptoError(RowShareError):
    category = "crypto"


class WrongKeyError(CryptoError):
    """A key was presented to an operation it cannot satisfy."""

    category = "wrong_key"


class IntegrityError(CryptoError):
    """Authenticated decryption failed: ciphertext or tag was altered."""

    category = "integrity"


class BadSignatureError(CryptoError):
    """Signature does not verify under the claimed public key."""

    category = "bad_signature"


class HexFormatError(CryptoError):
    """Payload is not valid uppercase hex of even length."""

    category = "bad_hex"


# --- row store ------------------------------------------------------------

class StoreError(RowShareError):
    category = "store"


class ScriptFormatError(StoreError):
    """A snapshot or journal line does not match the accepted grammar."""

    category = "script_format"


class UnknownTableError(StoreError):
    category = "unknown_table"


class DuplicateTableError(StoreError):
    category = "duplicate_table"


class DuplicateRowError(StoreError):
    category = "duplicate_row"


class MissingRowError(StoreError):
    category = "missing_row"


# --- key resolution / access control --------------------------------------

class KeyNotFoundError(RowShareError):
    """No decrypting key is available for the requested dossier."""

    category = "key_not_found"


class KeyExpiredError(KeyNotFoundError):
    """A key record exists but its validity window has passed."""

    category = "key_expired"


class NotOwnerError(RowShareError):
    """Caller tried to act on a dossier registered to someone else."""

    category = "not_owner"


# --- synchronizer service --------------------------------------------------

class ServiceError(RowShareError):
    category = "service"


class UnknownUserError(ServiceError):
    category = "unknown_user"


class DuplicateUserError(ServiceError):
    category = "duplicate_user"


class BadCredentialsError(ServiceError):
    category = "bad_credentials"


class SessionExpiredError(ServiceError):
    category = "session_expired"


class NotFoundError(ServiceError):
    """Requested record does not exist on the service."""

    category = "not_found"


# --- transport -------------------------------------------------------------

class TransportError(RowShareError):
    category = "transport"


class UnreachableError(TransportError):
    """Peer cannot be contacted; the caller may retry later."""

    category = "unreachable"


class ProtocolError(TransportError):
    """Peer sent a frame that does not parse as a valid message."""

    category = "protocol"


# --- configuration / CLI ----------------------------------------------------

class ConfigError(RowShareError):
    category = "bad_config"


_REGISTRY: dict[str, type[RowShareError]] = {}


def _register(cls: type[RowShareError]) -> None:
    _REGISTRY[cls.category] = cls
    for sub in cls.__subclasses__():
        _register(sub)


_register(RowShareError)


def error_for_category(category: str, message: str) -> RowShareError:
    """Rebuild an exception from a wire-level error category.

    Unknown categories degrade to the base class instead of failing, so a
    newer peer can still report errors to an older client.
    """
    cls = _REGISTRY.get(category, RowShareError)
    return cls(message)
