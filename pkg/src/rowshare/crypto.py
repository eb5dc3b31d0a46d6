"""Cryptographic primitives: row encryption, key wrapping, signatures.

Three layers, used by everything above:

- symmetric authenticated encryption (AES-256-GCM) for serialized rows,
- asymmetric key wrapping (X25519 + HKDF-SHA256 + AES-256-GCM) so a row key
  can be handed to a receiver through an untrusted relay,
- Ed25519 signatures so the relay and the receiver can check who deposited
  a record.

A key pair bundles one exchange key and one signing key; the public half is
the 64-byte concatenation of both public keys.  All functions here are pure
apart from randomness and the operation counters, so they are safe to call
from any thread.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from .errors import CryptoError, HexFormatError, IntegrityError, WrongKeyError

SYMMETRIC_KEY_LEN = 32          # AES-256
NONCE_LEN = 12
TAG_LEN = 16
CURVE_KEY_LEN = 32              # X25519 and Ed25519 both use 32-byte keys
PUBLIC_LEN = 2 * CURVE_KEY_LEN  # exchange public || signing public
PRIVATE_LEN = 2 * CURVE_KEY_LEN

_WRAP_INFO = b"rowshare wrapped row key v1"

# Type aliases; the raw bytes are the value, there is no richer structure.
SymmetricKey = bytes
Signature = bytes


@dataclass
class CryptoCounters:
    """Running totals of primitive invocations, for cost accounting."""

    row_encrypts: int = 0
    row_decrypts: int = 0
    key_wraps: int = 0
    key_unwraps: int = 0
    signs: int = 0
    verifies: int = 0

    def snapshot(self) -> CryptoCounters:
        return CryptoCounters(
            self.row_encrypts,
            self.row_decrypts,
            self.key_wraps,
            self.key_unwraps,
            self.signs,
            self.verifies,
        )

    def since(self, earlier: CryptoCounters) -> CryptoCounters:
        return CryptoCounters(
            self.row_encrypts - earlier.row_encrypts,
            self.row_decrypts - earlier.row_decrypts,
            self.key_wraps - earlier.key_wraps,
            self.key_unwraps - earlier.key_unwraps,
            self.signs - earlier.signs,
            self.verifies - earlier.verifies,
        )


COUNTERS = CryptoCounters()


@dataclass(frozen=True)
class KeyPair:
    """One party's long-term key material.

    ``public`` is exchange||signing public bytes and is what gets registered
    with a synchronizer; ``private`` is the matching concatenation and must
    never leave the owner's machine.
    """

    public: bytes
    private: bytes
    key_id: str

    @property
    def exchange_public(self) -> bytes:
        return self.public[:CURVE_KEY_LEN]

    @property
    def signing_public(self) -> bytes:
        return self.public[CURVE_KEY_LEN:]

    @property
    def exchange_private(self) -> bytes:
        return self.private[:CURVE_KEY_LEN]

    @property
    def signing_private(self) -> bytes:
        return self.private[CURVE_KEY_LEN:]


@dataclass(frozen=True)
class Ciphertext:
    """An encrypted row: nonce, body, and authentication tag."""

    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, blob: bytes) -> Ciphertext:
        if len(blob) < NONCE_LEN + TAG_LEN:
            raise IntegrityError(
                f"ciphertext blob too short: {len(blob)} bytes"
            )
        return cls(
            nonce=blob[:NONCE_LEN],
            body=blob[NONCE_LEN:-TAG_LEN],
            tag=blob[-TAG_LEN:],
        )


def _key_id(public: bytes) -> str:
    return hashlib.sha256(public).hexdigest()[:16].upper()


def generate_keypair() -> KeyPair:
    """Create a fresh exchange+signing key pair."""
    xk = X25519PrivateKey.generate()
    sk = Ed25519PrivateKey.generate()
    raw = PrivateFormat.Raw
    enc = Encoding.Raw
    public = (
        xk.public_key().public_bytes(enc, PublicFormat.Raw)
        + sk.public_key().public_bytes(enc, PublicFormat.Raw)
    )
    private = (
        xk.private_bytes(enc, raw, NoEncryption())
        + sk.private_bytes(enc, raw, NoEncryption())
    )
    return KeyPair(public=public, private=private, key_id=_key_id(public))


def generate_row_key() -> SymmetricKey:
    """Fresh 256-bit key for encrypting one dossier version."""
    return os.urandom(SYMMETRIC_KEY_LEN)


def _check_symmetric_key(k: bytes) -> None:
    if not isinstance(k, (bytes, bytearray)) or len(k) != SYMMETRIC_KEY_LEN:
        raise WrongKeyError(
            f"symmetric key must be {SYMMETRIC_KEY_LEN} bytes"
        )


@lru_cache(maxsize=8192)
def _x25519_public(raw: bytes) -> X25519PublicKey:
    return X25519PublicKey.from_public_bytes(raw)


@lru_cache(maxsize=8192)
def _ed25519_public(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def _split_exchange_public(receiver_pub: bytes) -> bytes:
    # Accept either the full 64-byte bundle or a bare 32-byte exchange key.
    if len(receiver_pub) == PUBLIC_LEN:
        return receiver_pub[:CURVE_KEY_LEN]
    if len(receiver_pub) == CURVE_KEY_LEN:
        return receiver_pub
    raise CryptoError(
        f"public key must be {CURVE_KEY_LEN} or {PUBLIC_LEN} bytes, "
        f"got {len(receiver_pub)}"
    )


def _derive_wrap_key(shared: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(),
        length=SYMMETRIC_KEY_LEN,
        salt=None,
        info=_WRAP_INFO,
    ).derive(shared)


def wrap_key(k: SymmetricKey, receiver_pub: bytes) -> bytes:
    """Encrypt a row key so only the holder of ``receiver_pub`` can read it.

    Uses an ephemeral X25519 exchange, so wrapping the same key twice yields
    different blobs.  Layout: ephemeral public (32) || nonce (12) || sealed
    key (32+16).
    """
    _check_symmetric_key(k)
    exchange_pub = _split_exchange_public(receiver_pub)
    try:
        peer = _x25519_public(exchange_pub)
    except Exception as exc:
        raise CryptoError(f"malformed public key: {exc}") from exc
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    kek = _derive_wrap_key(eph.exchange(peer))
    nonce = os.urandom(NONCE_LEN)
    sealed = AESGCM(kek).encrypt(nonce, k, eph_pub)
    COUNTERS.key_wraps += 1
    return eph_pub + nonce + sealed


def unwrap_key(blob: bytes, priv: bytes) -> SymmetricKey:
    """Recover a row key from a wrap_key blob using the private half."""
    min_len = CURVE_KEY_LEN + NONCE_LEN + SYMMETRIC_KEY_LEN + TAG_LEN
    if len(blob) != min_len:
        raise IntegrityError(
            f"wrapped key blob must be {min_len} bytes, got {len(blob)}"
        )
    if len(priv) == PRIVATE_LEN:
        priv = priv[:CURVE_KEY_LEN]
    elif len(priv) != CURVE_KEY_LEN:
        raise CryptoError(f"private key must be {CURVE_KEY_LEN} bytes")
    eph_pub = blob[:CURVE_KEY_LEN]
    nonce = blob[CURVE_KEY_LEN:CURVE_KEY_LEN + NONCE_LEN]
    sealed = blob[CURVE_KEY_LEN + NONCE_LEN:]
    try:
        own = X25519PrivateKey.from_private_bytes(priv)
        kek = _derive_wrap_key(own.exchange(_x25519_public(eph_pub)))
        k = AESGCM(kek).decrypt(nonce, sealed, eph_pub)
    except InvalidTag as exc:
        raise WrongKeyError("wrapped key does not open under this private key") from exc
    except CryptoError:
        raise
    except Exception as exc:
        raise IntegrityError(f"corrupt wrapped key blob: {exc}") from exc
    COUNTERS.key_unwraps += 1
    return k


def sign(msg: bytes, priv: bytes) -> Signature:
    """Sign canonical message bytes with the Ed25519 half of ``priv``."""
    if len(priv) == PRIVATE_LEN:
        priv = priv[CURVE_KEY_LEN:]
    elif len(priv) != CURVE_KEY_LEN:
        raise CryptoError(f"private key must be {CURVE_KEY_LEN} bytes")
    COUNTERS.signs += 1
    return Ed25519PrivateKey.from_private_bytes(priv).sign(msg)


def verify(msg: bytes, sig: Signature, pub: bytes) -> bool:
    """True iff ``sig`` was produced over ``msg`` by the key behind ``pub``."""
    if len(pub) == PUBLIC_LEN:
        pub = pub[CURVE_KEY_LEN:]
    elif len(pub) != CURVE_KEY_LEN:
        raise CryptoError(f"public key must be {CURVE_KEY_LEN} bytes")
    COUNTERS.verifies += 1
    try:
        _ed25519_public(pub).verify(sig, msg)
    except InvalidSignature:
        return False
    except Exception as exc:
        raise CryptoError(f"malformed signature input: {exc}") from exc
    return True


def encrypt_row(serialized: bytes, k: SymmetricKey) -> Ciphertext:
    """Encrypt one serialized row under a per-version key."""
    _check_symmetric_key(k)
    nonce = os.urandom(NONCE_LEN)
    out = AESGCM(k).encrypt(nonce, serialized, None)
    COUNTERS.row_encrypts += 1
    return Ciphertext(nonce=nonce, body=out[:-TAG_LEN], tag=out[-TAG_LEN:])


def decrypt_row(ct: Ciphertext, k: SymmetricKey) -> bytes:
    """Open an encrypted row; fails on any tamper or key mismatch."""
    _check_symmetric_key(k)
    try:
        out = AESGCM(k).decrypt(ct.nonce, ct.body + ct.tag, None)
    except InvalidTag as exc:
        raise IntegrityError(
            "row ciphertext failed authentication (tampered or wrong key)"
        ) from exc
    COUNTERS.row_decrypts += 1
    return out


_HEX_ALPHABET = frozenset("0123456789ABCDEF")


def hex_encode(data: bytes) -> str:
    """Uppercase hex text for a byte string."""
    return data.hex().upper()


def hex_decode(text: str) -> bytes:
    """Inverse of hex_encode; rejects non-hex characters and odd length."""
    bad = set(text) - _HEX_ALPHABET
    if bad:
        raise HexFormatError(
            f"invalid hex character {sorted(bad)[0]!r}"
        )
    if len(text) % 2:
        raise HexFormatError(f"odd-length hex text ({len(text)} chars)")
    return bytes.fromhex(text)
