"""The synchronizer service: an untrusted relay for keys and encrypted rows.

It keeps three tables (users, wrapped keys, pending rows) plus two pieces of
bookkeeping (which user first wrote each dossier, and queued resend
requests).  It verifies deposit signatures against registered public keys
and enforces first-writer dossier ownership, but it can never open a wrapped
key or an encrypted row.

State changes are journaled to a single line-oriented file (one JSON event
per line under a version header) and replayed on start; sessions are
deliberately volatile.  All operations are serialized through one lock, so
each one is atomic from any client's point of view.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .crypto import hex_decode, hex_encode
from .errors import (
    BadCredentialsError,
    BadSignatureError,
    DuplicateUserError,
    KeyExpiredError,
    KeyNotFoundError,
    NotFoundError,
    NotOwnerError,
    ProtocolError,
    RowShareError,
    SessionExpiredError,
    UnknownUserError,
)
from .crypto import verify
from .records import PendingRow, WrappedKeyRecord
from .wire import decode_request, encode_error, encode_ok

logger = logging.getLogger(__name__)

JOURNAL_HEADER = "rowshare-service 1"
DEFAULT_SESSION_IDLE_SECONDS = 30 * 60
DEFAULT_PBKDF2_ITERATIONS = 100_000

KNOWN_OPS = frozenset({
    "ping",
    "register_user",
    "login",
    "select_user",
    "get_public_key",
    "update_public_key",
    "deposit_key",
    "delete_keys",
    "get_key",
    "send_row",
    "get_pending_rows",
    "get_all_users",
    "resend_row",
    "get_resend_requests",
})


@dataclass
class UserRecord:
    user_id: str
    public_key: bytes
    salt: bytes
    password_digest: bytes


@dataclass
class _Session:
    user_id: str
    last_used: float


class SynchronizerService:
    """Core service logic plus its wire dispatch and persistence."""

    def __init__(
        self,
        journal_path: str | os.PathLike[str] | None = None,
        clock: Callable[[], float] = time.time,
        session_idle_seconds: float = DEFAULT_SESSION_IDLE_SECONDS,
        pbkdf2_iterations: int = DEFAULT_PBKDF2_ITERATIONS,
    ) -> None:
        self.clock = clock
        self.session_idle_seconds = session_idle_seconds
        self.pbkdf2_iterations = pbkdf2_iterations
        self.journal_path = None if journal_path is None else Path(journal_path)
        self._lock = threading.RLock()
        self._journal_file = None

        self.users: dict[str, UserRecord] = {}
        # (dossier_id, receiver_id) -> key_version -> record
        self.keys: dict[tuple[int, str], dict[int, WrappedKeyRecord]] = {}
        self.pending: dict[int, PendingRow] = {}
        # (sender, receiver, dossier, key_version) -> pending id, so a client
        # retrying a deposit after a lost response does not double-deliver.
        self._pending_coord: dict[tuple[str, str, int, int], int] = {}
        self.next_pending_id = 1
        self.dossier_owner: dict[int, str] = {}
        self.resend_queue: dict[str, list[tuple[int, str]]] = {}
        self.sessions: dict[str, _Session] = {}

        if self.journal_path is not None:
            self._replay_journal()
            self._journal_file = open(self.journal_path, "a", encoding="utf-8")
            if self.journal_path.stat().st_size == 0:
                self._journal_file.write(JOURNAL_HEADER + "\n")
                self._journal_file.flush()

    # -- persistence -----------------------------------------------------------

    def _replay_journal(self) -> None:
        path = self.journal_path
        if not path.exists() or path.stat().st_size == 0:
            return
        text = path.read_text(encoding="utf-8")
        lines = text.split("\n")
        torn = lines and lines[-1] != ""
        if torn:
            lines = lines[:-1]  # partial trailing write from a crash
        else:
            lines = lines[:-1]
        if not lines:
            return
        if lines[0] != JOURNAL_HEADER:
            raise ProtocolError(
                f"unrecognized service journal header: {lines[0]!r}"
            )
        for line in lines[1:]:
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"corrupt journal line: {exc}") from exc
            self._apply_event(event)

    def _apply_event(self, event: dict) -> None:
        kind = event["event"]
        if kind == "register":
            self.users[event["user_id"]] = UserRecord(
                user_id=event["user_id"],
                public_key=hex_decode(event["public_key"]),
                salt=hex_decode(event["salt"]),
                password_digest=hex_decode(event["digest"]),
            )
        elif kind == "update_pk":
            self.users[event["user_id"]].public_key = hex_decode(event["public_key"])
        elif kind == "deposit_key":
            record = WrappedKeyRecord.from_wire(event["record"])
            pair = (record.dossier_id, record.receiver_id)
            self.keys.setdefault(pair, {})[record.key_version] = record
            self.dossier_owner.setdefault(record.dossier_id, record.sender_id)
        elif kind == "delete_keys":
            self.keys.pop((event["dossier_id"], event["receiver_id"]), None)
            for pid in list(self.pending):
                row = self.pending[pid]
                if (row.dossier_id == event["dossier_id"]
                        and row.receiver_id == event["receiver_id"]):
                    self._drop_pending(pid)
        elif kind == "send_row":
            record = PendingRow.from_wire(event["record"])
            self._store_pending(record)
            self.next_pending_id = max(self.next_pending_id, record.id_pending_row + 1)
            self.dossier_owner.setdefault(record.dossier_id, record.sender_id)
        elif kind == "ack_rows":
            for pid in event["ids"]:
                self._drop_pending(pid)
        elif kind == "resend":
            self.resend_queue.setdefault(event["owner"], []).append(
                (event["dossier_id"], event["receiver_id"])
            )
        elif kind == "resend_taken":
            self.resend_queue.pop(event["owner"], None)
        else:
            raise ProtocolError(f"unknown journal event: {kind!r}")

    def _coord(self, row: PendingRow) -> tuple[str, str, int, int]:
        return (row.sender_id, row.receiver_id, row.dossier_id, row.key_version)

    def _store_pending(self, row: PendingRow) -> None:
        stale = self._pending_coord.get(self._coord(row))
        if stale is not None:
            self.pending.pop(stale, None)
        self.pending[row.id_pending_row] = row
        self._pending_coord[self._coord(row)] = row.id_pending_row

    def _drop_pending(self, pid: int) -> None:
        row = self.pending.pop(pid, None)
        if row is not None and self._pending_coord.get(self._coord(row)) == pid:
            del self._pending_coord[self._coord(row)]

    def _journal(self, event: dict) -> None:
        if self._journal_file is None:
            return
        self._journal_file.write(json.dumps(event, separators=(",", ":")) + "\n")
        self._journal_file.flush()

    def close(self) -> None:
        with self._lock:
            if self._journal_file is not None:
                self._journal_file.close()
                self._journal_file = None

    # -- sessions ----------------------------------------------------------------

    def _require_session(self, session: str | None) -> str:
        if session is None or session not in self.sessions:
            raise SessionExpiredError("no valid session; log in first")
        entry = self.sessions[session]
        now = self.clock()
        if now - entry.last_used > self.session_idle_seconds:
            del self.sessions[session]
            raise SessionExpiredError("session expired; log in again")
        entry.last_used = now
        return entry.user_id

    def _digest(self, password: str, salt: bytes) -> bytes:
        return hashlib.pbkdf2_hmac(
            "sha256", password.encode(), salt, self.pbkdf2_iterations
        )

    # -- registration interface ----------------------------------------------------

    def register_user(self, user_id: str, public_key: bytes, password: str) -> None:
        if not user_id:
            raise ProtocolError("empty user id")
        if user_id in self.users:
            raise DuplicateUserError(f"user {user_id!r} already registered")
        salt = secrets.token_bytes(16)
        record = UserRecord(user_id, public_key, salt, self._digest(password, salt))
        self.users[user_id] = record
        self._journal({
            "event": "register",
            "user_id": user_id,
            "public_key": hex_encode(public_key),
            "salt": hex_encode(salt),
            "digest": hex_encode(record.password_digest),
        })

    def login(self, user_id: str, password: str) -> str:
        record = self.users.get(user_id)
        if record is None:
            raise BadCredentialsError("unknown user or wrong password")
        if not secrets.compare_digest(
            record.password_digest, self._digest(password, record.salt)
        ):
            raise BadCredentialsError("unknown user or wrong password")
        token = secrets.token_hex(16)
        self.sessions[token] = _Session(user_id, self.clock())
        return token

    def select_user(self, user_id: str) -> UserRecord:
        record = self.users.get(user_id)
        if record is None:
            raise UnknownUserError(f"no such user: {user_id!r}")
        return record

    # -- key interface ----------------------------------------------------------------

    def _verify_sender(self, sender_id: str, signing_bytes: bytes, signature: bytes) -> None:
        record = self.users.get(sender_id)
        if record is None:
            raise UnknownUserError(f"sender {sender_id!r} not registered")
        if not verify(signing_bytes, signature, record.public_key):
            raise BadSignatureError("deposit signature does not verify")

    def _claim_dossier(self, dossier_id: int, sender_id: str) -> None:
        owner = self.dossier_owner.setdefault(dossier_id, sender_id)
        if owner != sender_id:
            raise NotOwnerError(
                f"dossier {dossier_id} belongs to {owner!r}, not {sender_id!r}"
            )

    def deposit_key(self, caller: str, record: WrappedKeyRecord) -> None:
        if record.sender_id != caller:
            raise NotOwnerError("sender_id does not match the session user")
        if record.receiver_id not in self.users:
            raise UnknownUserError(f"receiver {record.receiver_id!r} not registered")
        self._verify_sender(record.sender_id, record.signing_bytes(), record.sender_signature)
        self._claim_dossier(record.dossier_id, record.sender_id)
        pair = (record.dossier_id, record.receiver_id)
        self.keys.setdefault(pair, {})[record.key_version] = record
        self._journal({"event": "deposit_key", "record": record.to_wire()})

    def delete_keys(self, caller: str, dossier_id: int, receiver_id: str) -> int:
        owner = self.dossier_owner.get(dossier_id)
        if owner is not None and owner != caller:
            raise NotOwnerError(f"dossier {dossier_id} is not {caller!r}'s")
        removed = self.keys.pop((dossier_id, receiver_id), None)
        dropped_pending = [
            pid for pid, row in self.pending.items()
            if row.dossier_id == dossier_id and row.receiver_id == receiver_id
        ]
        for pid in dropped_pending:
            self._drop_pending(pid)
        if removed is None and not dropped_pending:
            raise NotFoundError(
                f"no keys for dossier {dossier_id} and receiver {receiver_id!r}"
            )
        self._journal({
            "event": "delete_keys",
            "dossier_id": dossier_id,
            "receiver_id": receiver_id,
        })
        return len(removed or {})

    def get_key(
        self, caller: str, dossier_id: int, key_version: int | None
    ) -> WrappedKeyRecord:
        versions = self.keys.get((dossier_id, caller))
        if not versions:
            raise KeyNotFoundError(
                f"no key for dossier {dossier_id} addressed to {caller!r}"
            )
        version = max(versions) if key_version is None else key_version
        record = versions.get(version)
        if record is None:
            raise KeyNotFoundError(
                f"no key version {version} for dossier {dossier_id}"
            )
        if record.expiry is not None and self.clock() > record.expiry:
            raise KeyExpiredError(
                f"key for dossier {dossier_id} expired at {record.expiry}"
            )
        return record

    def get_public_key(self, user_id: str) -> bytes:
        record = self.users.get(user_id)
        if record is None:
            raise NotFoundError(f"no such user: {user_id!r}")
        return record.public_key

    def update_public_key(self, caller: str, public_key: bytes) -> None:
        self.users[caller].public_key = public_key
        self._journal({
            "event": "update_pk",
            "user_id": caller,
            "public_key": hex_encode(public_key),
        })

    # -- row interface -------------------------------------------------------------------

    def send_row(self, caller: str, row: PendingRow) -> int:
        if row.sender_id != caller:
            raise NotOwnerError("sender_id does not match the session user")
        if row.receiver_id not in self.users:
            raise UnknownUserError(f"receiver {row.receiver_id!r} not registered")
        self._verify_sender(row.sender_id, row.signing_bytes(), row.sender_signature)
        self._claim_dossier(row.dossier_id, row.sender_id)
        pid = self.next_pending_id
        self.next_pending_id += 1
        stored = PendingRow(
            sender_id=row.sender_id,
            receiver_id=row.receiver_id,
            dossier_id=row.dossier_id,
            key_version=row.key_version,
            encrypted_row=row.encrypted_row,
            sender_signature=row.sender_signature,
            id_pending_row=pid,
            submitted_at=self.clock(),
        )
        self._store_pending(stored)
        self._journal({"event": "send_row", "record": stored.to_wire()})
        return pid

    def get_pending_rows(self, caller: str, ack_ids: list[int]) -> list[PendingRow]:
        acked = [
            pid for pid in ack_ids
            if pid in self.pending and self.pending[pid].receiver_id == caller
        ]
        for pid in acked:
            self._drop_pending(pid)
        if acked:
            self._journal({"event": "ack_rows", "ids": acked})
        return sorted(
            (row for row in self.pending.values() if row.receiver_id == caller),
            key=lambda row: row.id_pending_row,
        )

    def get_all_users(self) -> list[tuple[str, bytes]]:
        return [(u.user_id, u.public_key) for u in self.users.values()]

    def resend_row(self, caller: str, dossier_id: int) -> None:
        owner = self.dossier_owner.get(dossier_id)
        if owner is None:
            raise NotFoundError(f"unknown dossier: {dossier_id}")
        self.resend_queue.setdefault(owner, []).append((dossier_id, caller))
        self._journal({
            "event": "resend",
            "owner": owner,
            "dossier_id": dossier_id,
            "receiver_id": caller,
        })

    def get_resend_requests(self, caller: str) -> list[tuple[int, str]]:
        queued = self.resend_queue.pop(caller, [])
        if queued:
            self._journal({"event": "resend_taken", "owner": caller})
        return queued

    # -- introspection (tests and tooling) --------------------------------------------------

    def pair_state(self, dossier_id: int, receiver_id: str) -> str:
        """Observable state for one (dossier, receiver) pair."""
        has_key = bool(self.keys.get((dossier_id, receiver_id)))
        has_pending = any(
            row.dossier_id == dossier_id and row.receiver_id == receiver_id
            for row in self.pending.values()
        )
        if has_key and has_pending:
            return "keyed_pending"
        if has_key:
            return "keyed"
        if has_pending:
            return "pending_only"
        return "empty"

    def fingerprint(self) -> str:
        """Digest of all persisted state; stable iff nothing mutated."""
        state = {
            "users": sorted(
                (u.user_id, hex_encode(u.public_key), hex_encode(u.salt),
                 hex_encode(u.password_digest))
                for u in self.users.values()
            ),
            "keys": sorted(
                (d, r, v, hex_encode(rec.wrapped_key), hex_encode(rec.sender_signature))
                for (d, r), versions in self.keys.items()
                for v, rec in versions.items()
            ),
            "pending": sorted(
                (pid, row.to_wire()["encrypted_row"], row.sender_id, row.receiver_id)
                for pid, row in self.pending.items()
            ),
            "owners": sorted(self.dossier_owner.items()),
            "resend": sorted(
                (owner, tuple(map(tuple, queue)))
                for owner, queue in self.resend_queue.items()
            ),
        }
        blob = json.dumps(state, separators=(",", ":"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- wire dispatch ----------------------------------------------------------------------

    def handle_line(self, line: bytes) -> bytes:
        try:
            op, session, payload = decode_request(line)
            with self._lock:
                result = self._dispatch(op, session, payload)
            return encode_ok(result)
        except RowShareError as exc:
            return encode_error(exc)
        except Exception as exc:
            logger.exception("unexpected failure handling %r", line[:80])
            return encode_error(RowShareError(f"internal error: {exc}"))

    def _dispatch(self, op: str, session: str | None, payload: dict) -> Any:
        if op not in KNOWN_OPS:
            raise ProtocolError(f"unknown op: {op!r}")
        try:
            if op == "ping":
                return "pong"
            if op == "register_user":
                self.register_user(
                    payload["user_id"],
                    hex_decode(payload["public_key"]),
                    payload["password"],
                )
                return None
            if op == "login":
                return self.login(payload["user_id"], payload["password"])
            if op == "select_user":
                record = self.select_user(payload["user_id"])
                return {
                    "user_id": record.user_id,
                    "public_key": hex_encode(record.public_key),
                }
            caller = self._require_session(session)
            if op == "get_public_key":
                return hex_encode(self.get_public_key(payload["user_id"]))
            if op == "update_public_key":
                self.update_public_key(caller, hex_decode(payload["public_key"]))
                return None
            if op == "deposit_key":
                self.deposit_key(caller, WrappedKeyRecord.from_wire(payload["record"]))
                return None
            if op == "delete_keys":
                return self.delete_keys(
                    caller, int(payload["dossier_id"]), payload["receiver_id"]
                )
            if op == "get_key":
                version = payload.get("key_version")
                record = self.get_key(
                    caller,
                    int(payload["dossier_id"]),
                    None if version is None else int(version),
                )
                return record.to_wire()
            if op == "send_row":
                return self.send_row(caller, PendingRow.from_wire(payload["record"]))
            if op == "get_pending_rows":
                rows = self.get_pending_rows(
                    caller, [int(i) for i in payload.get("ack_ids", [])]
                )
                return [row.to_wire() for row in rows]
            if op == "get_all_users":
                return [
                    {"user_id": uid, "public_key": hex_encode(pk)}
                    for uid, pk in self.get_all_users()
                ]
            if op == "resend_row":
                self.resend_row(caller, int(payload["dossier_id"]))
                return None
            if op == "get_resend_requests":
                return [
                    {"dossier_id": d, "receiver_id": r}
                    for d, r in self.get_resend_requests(caller)
                ]
            raise AssertionError(f"op {op!r} listed but not handled")
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad payload for {op!r}: {exc}") from exc
