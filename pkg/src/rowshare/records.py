"""Record types that travel between clients and a synchronizer.

Both backends (service and mailbox) move the same two records around: a
wrapped per-dossier key and an encrypted pending row.  The synchronizer can
read every field here except the wrapped key bytes and the row ciphertext;
that is the whole point of the design.

Signing covers a canonical byte string that binds the record kind, the
sender, the addressee, and the dossier coordinates to the opaque blob, so a
relay cannot splice a blob into a different context without breaking the
signature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .crypto import hex_decode, hex_encode
from .errors import ProtocolError


def _canonical(kind: str, *parts: str | bytes) -> bytes:
    out = [kind.encode()]
    for part in parts:
        out.append(part if isinstance(part, bytes) else part.encode())
    return b"\x00".join(out)


@dataclass(frozen=True)
class WrappedKeyRecord:
    """One dossier key, wrapped for one receiver, signed by the sender."""

    dossier_id: int
    key_version: int
    sender_id: str
    receiver_id: str
    expiry: float | None
    wrapped_key: bytes
    sender_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return _canonical(
            "DK",
            self.sender_id,
            self.receiver_id,
            str(self.dossier_id),
            str(self.key_version),
            "" if self.expiry is None else repr(self.expiry),
            self.wrapped_key,
        )

    def signed(self, signature: bytes) -> WrappedKeyRecord:
        return replace(self, sender_signature=signature)

    def to_wire(self) -> dict:
        return {
            "dossier_id": self.dossier_id,
            "key_version": self.key_version,
            "sender_id": self.sender_id,
            "receiver_id": self.receiver_id,
            "expiry": self.expiry,
            "wrapped_key": hex_encode(self.wrapped_key),
            "sender_signature": hex_encode(self.sender_signature),
        }

    @classmethod
    def from_wire(cls, data: dict) -> WrappedKeyRecord:
        try:
            expiry = data["expiry"]
            return cls(
                dossier_id=int(data["dossier_id"]),
                key_version=int(data["key_version"]),
                sender_id=str(data["sender_id"]),
                receiver_id=str(data["receiver_id"]),
                expiry=None if expiry is None else float(expiry),
                wrapped_key=hex_decode(data["wrapped_key"]),
                sender_signature=hex_decode(data["sender_signature"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad wrapped-key record: {exc}") from exc


@dataclass(frozen=True)
class PendingRow:
    """One encrypted row in transit from owner to receiver.

    ``id_pending_row`` and ``submitted_at`` are assigned by the synchronizer
    on deposit and are therefore outside the signature.
    """

    sender_id: str
    receiver_id: str
    dossier_id: int
    key_version: int
    encrypted_row: bytes
    sender_signature: bytes = b""
    id_pending_row: int | None = None
    submitted_at: float | None = None

    def signing_bytes(self) -> bytes:
        return _canonical(
            "PR",
            self.sender_id,
            self.receiver_id,
            str(self.dossier_id),
            str(self.key_version),
            self.encrypted_row,
        )

    def signed(self, signature: bytes) -> PendingRow:
        return replace(self, sender_signature=signature)

    def to_wire(self) -> dict:
        return {
            "sender_id": self.sender_id,
            "receiver_id": self.receiver_id,
            "dossier_id": self.dossier_id,
            "key_version": self.key_version,
            "encrypted_row": hex_encode(self.encrypted_row),
            "sender_signature": hex_encode(self.sender_signature),
            "id_pending_row": self.id_pending_row,
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_wire(cls, data: dict) -> PendingRow:
        try:
            row_id = data.get("id_pending_row")
            submitted = data.get("submitted_at")
            return cls(
                sender_id=str(data["sender_id"]),
                receiver_id=str(data["receiver_id"]),
                dossier_id=int(data["dossier_id"]),
                key_version=int(data["key_version"]),
                encrypted_row=hex_decode(data["encrypted_row"]),
                sender_signature=hex_decode(data["sender_signature"]),
                id_pending_row=None if row_id is None else int(row_id),
                submitted_at=None if submitted is None else float(submitted),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad pending-row record: {exc}") from exc
