"""Client-side protocol: grant, send, receive, use, revoke, resend.

A client agent owns one row store, one keypair, and one backend connection.
Owners keep a registry mapping dossier ids to their own rows, a grant table
saying who may see what, and a volatile current key per dossier.  Receivers
keep ciphertext on disk and decrypt only in memory; fetched keys live in a
volatile cache that is consulted only when the synchronizer is unreachable,
so a revocation takes effect on the very next use() while online.

Key versions count deposits per dossier: the first grant mints the dossier
key, every send rotates it, and a re-grant re-wraps the current key under a
new version so previously retained ciphertext becomes readable again.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, TextIO

from .crypto import (
    KeyPair,
    encrypt_row,
    generate_keypair,
    generate_row_key,
    hex_decode,
    hex_encode,
    sign,
    unwrap_key,
    verify,
    wrap_key,
)
from .errors import (
    ConfigError,
    DuplicateUserError,
    KeyNotFoundError,
    NotFoundError,
    NotOwnerError,
    RowShareError,
    SessionExpiredError,
    UnreachableError,
    WrongKeyError,
)
from .records import PendingRow, WrappedKeyRecord
from .rowstore import (
    KeyAnswer,
    KeyStatus,
    RevokePolicy,
    Row,
    Store,
    serialize_row,
)
from .wire import Transport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AccessGrant:
    """One receiver's access to one dossier."""

    dossier_id: int
    receiver_id: str
    allowed_columns: frozenset[str]
    key_version: int
    expiry: float | None = None


class ReceiverPhase:
    IDLE = "idle"
    HAS_CIPHERTEXT = "has_ciphertext"
    HAS_KEY = "has_key"
    DECRYPTED = "decrypted"


def project(row: Row, grant: AccessGrant) -> Row:
    """Restrict a row to the columns a grant allows.

    The restricted columns are absent from the result, not blanked, and the
    primary key always survives (enforced when the grant is created).
    """
    fields = tuple(
        (name, value) for name, value in row.fields
        if name in grant.allowed_columns
    )
    return Row(row.table, row.pk, fields, row.origin, row.shared_id)


class Backend(Protocol):
    """What a client needs from any synchronizer flavor."""

    def ensure_user(self, user_id: str, public_key: bytes, password: str) -> None: ...
    def get_public_key(self, user_id: str) -> bytes: ...
    def update_public_key(self, public_key: bytes) -> None: ...
    def deposit_key(self, record: WrappedKeyRecord) -> None: ...
    def delete_keys(self, dossier_id: int, receiver_id: str) -> None: ...
    def get_key(self, dossier_id: int, key_version: int | None) -> WrappedKeyRecord: ...
    def send_row(self, row: PendingRow) -> int: ...
    def fetch_rows(self, ack_ids: list[int]) -> list[PendingRow]: ...
    def resend_row(self, dossier_id: int) -> None: ...
    def get_resend_requests(self) -> list[tuple[int, str]]: ...


class ServiceBackend:
    """Synchronizer-service backend over any wire transport."""

    def __init__(self, transport: Transport) -> None:
        self.transport = transport
        self._session: str | None = None
        self._user_id: str | None = None
        self._password: str | None = None
        self._public_key: bytes | None = None

    def _call(self, op: str, payload: dict, authed: bool = True):
        if not authed:
            return self.transport.call(op, payload)
        try:
            return self.transport.call(op, payload, self._session)
        except SessionExpiredError:
            if self._user_id is None:
                raise
            self._login()
            return self.transport.call(op, payload, self._session)

    def _login(self) -> None:
        """Open a session, registering first if this user is unknown there."""
        try:
            self._session = self.transport.call(
                "login", {"user_id": self._user_id, "password": self._password}
            )
        except RowShareError as exc:
            if exc.category != "bad_credentials" or self._public_key is None:
                raise
            try:
                self.transport.call("register_user", {
                    "user_id": self._user_id,
                    "public_key": hex_encode(self._public_key),
                    "password": self._password,
                })
            except DuplicateUserError:
                raise exc from None  # user exists: the password really is wrong
            self._session = self.transport.call(
                "login", {"user_id": self._user_id, "password": self._password}
            )

    def ensure_user(self, user_id: str, public_key: bytes, password: str) -> None:
        self._user_id = user_id
        self._password = password
        self._public_key = public_key
        self._login()

    def get_public_key(self, user_id: str) -> bytes:
        return hex_decode(self._call("get_public_key", {"user_id": user_id}))

    def update_public_key(self, public_key: bytes) -> None:
        self._call("update_public_key", {"public_key": hex_encode(public_key)})

    def deposit_key(self, record: WrappedKeyRecord) -> None:
        self._call("deposit_key", {"record": record.to_wire()})

    def delete_keys(self, dossier_id: int, receiver_id: str) -> None:
        self._call("delete_keys", {
            "dossier_id": dossier_id, "receiver_id": receiver_id,
        })

    def get_key(self, dossier_id: int, key_version: int | None) -> WrappedKeyRecord:
        data = self._call("get_key", {
            "dossier_id": dossier_id, "key_version": key_version,
        })
        return WrappedKeyRecord.from_wire(data)

    def send_row(self, row: PendingRow) -> int:
        return self._call("send_row", {"record": row.to_wire()})

    def fetch_rows(self, ack_ids: list[int]) -> list[PendingRow]:
        rows = self._call("get_pending_rows", {"ack_ids": ack_ids})
        return [PendingRow.from_wire(item) for item in rows]

    def resend_row(self, dossier_id: int) -> None:
        self._call("resend_row", {"dossier_id": dossier_id})

    def get_resend_requests(self) -> list[tuple[int, str]]:
        items = self._call("get_resend_requests", {})
        return [(int(i["dossier_id"]), i["receiver_id"]) for i in items]


@dataclass
class _DossierEntry:
    dossier_id: int
    table: str
    pk: str


def _journal_events(path: Path) -> list[dict]:
    """Parse one-JSON-per-line events, dropping a torn trailing line."""
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]
    return [json.loads(line) for line in lines if line]


def _grant_from_dict(item: dict) -> AccessGrant:
    return AccessGrant(
        dossier_id=int(item["dossier_id"]),
        receiver_id=item["receiver_id"],
        allowed_columns=frozenset(item["allowed_columns"]),
        key_version=int(item["key_version"]),
        expiry=item.get("expiry"),
    )


def _grant_to_dict(grant: AccessGrant) -> dict:
    return {
        "dossier_id": grant.dossier_id,
        "receiver_id": grant.receiver_id,
        "allowed_columns": sorted(grant.allowed_columns),
        "key_version": grant.key_version,
        "expiry": grant.expiry,
    }


class ClientAgent:
    """One user's protocol state: store, keys, grants, and a backend."""

    def __init__(
        self,
        user_id: str,
        profile_dir: str | os.PathLike[str],
        backend: Backend,
        password: str,
        revoke_policy: RevokePolicy = RevokePolicy.KEEP_CACHED,
    ) -> None:
        self.user_id = user_id
        self.profile_dir = Path(profile_dir)
        self.profile_dir.mkdir(parents=True, exist_ok=True)
        self.backend = backend
        self.revoke_policy = revoke_policy

        self.keypair, self.old_private_keys = self._load_or_create_keypair()
        self.grants: dict[tuple[int, str], AccessGrant] = {}
        self.dossiers: dict[int, _DossierEntry] = {}
        self._registry_logs: dict[str, TextIO] = {}
        self._load_grants()
        self._load_dossiers()

        # Owner-side current symmetric key per dossier, volatile by design.
        self._dossier_keys: dict[int, tuple[bytes, int]] = {}
        self._versions: dict[int, int] = {}
        for grant in self.grants.values():
            old = self._versions.get(grant.dossier_id, 0)
            self._versions[grant.dossier_id] = max(old, grant.key_version)

        # Receiver-side volatile state.
        self.key_cache: dict[int, tuple[bytes, int]] = {}
        self._delivered_version: dict[int, int] = {}

        # Peer public keys pin on first use so a hostile synchronizer cannot
        # later substitute its own; only an explicit fresh fetch re-pins.
        self._peer_keys: dict[str, bytes] = {}
        self._load_peer_keys()

        # Deposits that could not reach the synchronizer, in order.
        self.outbox: list[tuple[str, object]] = []

        self.online = True
        try:
            backend.ensure_user(user_id, self.keypair.public, password)
        except UnreachableError:
            self.online = False
            logger.warning("%s: synchronizer unreachable, starting offline", user_id)

        self.store = Store.open(
            self.profile_dir / "store.script",
            self.profile_dir / "store.journal",
            self._resolve_key,
            revoke_policy,
        )

    # -- profile files -----------------------------------------------------------

    def _keypair_path(self) -> Path:
        return self.profile_dir / "keypair.json"

    def _load_or_create_keypair(self) -> tuple[KeyPair, list[bytes]]:
        path = self._keypair_path()
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            pair = KeyPair(
                public=hex_decode(data["public"]),
                private=hex_decode(data["private"]),
                key_id=data["key_id"],
            )
            old = [hex_decode(item) for item in data.get("old_private", [])]
            return pair, old
        pair = generate_keypair()
        self._write_keypair(pair, [])
        return pair, []

    def _write_keypair(self, pair: KeyPair, old_private: list[bytes]) -> None:
        blob = json.dumps({
            "public": hex_encode(pair.public),
            "private": hex_encode(pair.private),
            "key_id": pair.key_id,
            "old_private": [hex_encode(item) for item in old_private],
        }, indent=2)
        self._atomic_write(self._keypair_path(), blob)

    def _atomic_write(self, path: Path, text: str) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def _load_grants(self) -> None:
        path = self.profile_dir / "grants.json"
        if path.exists():
            for item in json.loads(path.read_text(encoding="utf-8")):
                grant = _grant_from_dict(item)
                self.grants[(grant.dossier_id, grant.receiver_id)] = grant
        journal = self.profile_dir / "grants.journal"
        if journal.exists():
            for event in _journal_events(journal):
                if "del" in event:
                    dossier_id, receiver_id = event["del"]
                    self.grants.pop((int(dossier_id), receiver_id), None)
                else:
                    grant = _grant_from_dict(event["set"])
                    self.grants[(grant.dossier_id, grant.receiver_id)] = grant

    def _record_grant(self, grant: AccessGrant) -> None:
        self.grants[(grant.dossier_id, grant.receiver_id)] = grant
        self._append_registry_event("grants", {"set": _grant_to_dict(grant)})

    def _drop_grant(self, dossier_id: int, receiver_id: str) -> None:
        del self.grants[(dossier_id, receiver_id)]
        self._append_registry_event("grants", {"del": [dossier_id, receiver_id]})

    def _append_registry_event(self, name: str, event: dict) -> None:
        # Registries persist as journal appends so each mutation costs O(1);
        # shutdown compacts the journal back into the json snapshot.
        handle = self._registry_logs.get(name)
        if handle is None:
            handle = open(
                self.profile_dir / f"{name}.journal", "a", encoding="utf-8"
            )
            self._registry_logs[name] = handle
        handle.write(json.dumps(event, separators=(",", ":")) + "\n")
        handle.flush()

    def _load_peer_keys(self) -> None:
        path = self.profile_dir / "pks.json"
        if not path.exists():
            return
        for user_id, key_hex in json.loads(path.read_text(encoding="utf-8")).items():
            self._peer_keys[user_id] = hex_decode(key_hex)

    def _save_peer_keys(self) -> None:
        items = {
            user_id: hex_encode(key)
            for user_id, key in sorted(self._peer_keys.items())
        }
        self._atomic_write(self.profile_dir / "pks.json", json.dumps(items, indent=2))

    def _load_dossiers(self) -> None:
        path = self.profile_dir / "dossiers.json"
        if path.exists():
            for item in json.loads(path.read_text(encoding="utf-8")):
                entry = _DossierEntry(
                    int(item["dossier_id"]), item["table"], item["pk"]
                )
                self.dossiers[entry.dossier_id] = entry
        journal = self.profile_dir / "dossiers.journal"
        if journal.exists():
            for event in _journal_events(journal):
                item = event["set"]
                entry = _DossierEntry(
                    int(item["dossier_id"]), item["table"], item["pk"]
                )
                self.dossiers[entry.dossier_id] = entry

    def _record_dossier(self, entry: _DossierEntry) -> None:
        self.dossiers[entry.dossier_id] = entry
        self._append_registry_event(
            "dossiers",
            {
                "set": {
                    "dossier_id": entry.dossier_id,
                    "table": entry.table,
                    "pk": entry.pk,
                }
            },
        )

    def _compact_registries(self) -> None:
        for handle in self._registry_logs.values():
            handle.close()
        self._registry_logs.clear()
        grants_journal = self.profile_dir / "grants.journal"
        if grants_journal.exists():
            items = [_grant_to_dict(g) for g in self.grants.values()]
            self._atomic_write(
                self.profile_dir / "grants.json", json.dumps(items, indent=2)
            )
            grants_journal.unlink()
        dossiers_journal = self.profile_dir / "dossiers.journal"
        if dossiers_journal.exists():
            items = [
                {"dossier_id": d.dossier_id, "table": d.table, "pk": d.pk}
                for d in self.dossiers.values()
            ]
            self._atomic_write(
                self.profile_dir / "dossiers.json", json.dumps(items, indent=2)
            )
            dossiers_journal.unlink()

    # -- owned data ----------------------------------------------------------------

    def create_table(self, name: str, columns: list[str]) -> None:
        self.store.create_table(name, columns)

    def add_dossier(self, dossier_id: int, table: str, values: list[str]) -> Row:
        """Insert an owned row and register it as a dossier."""
        if dossier_id in self.dossiers:
            raise ConfigError(f"dossier {dossier_id} already registered")
        row = self.store.insert(table, values)
        self._record_dossier(_DossierEntry(dossier_id, table, row.pk))
        return row

    def update_dossier(self, dossier_id: int, values: list[str]) -> Row:
        entry = self._own_dossier(dossier_id)
        return self.store.update(entry.table, entry.pk, values)

    def _own_dossier(self, dossier_id: int) -> _DossierEntry:
        entry = self.dossiers.get(dossier_id)
        if entry is None:
            raise NotOwnerError(f"{self.user_id} does not own dossier {dossier_id}")
        return entry

    def _own_row(self, dossier_id: int) -> Row:
        entry = self._own_dossier(dossier_id)
        row = self.store.get(entry.table, entry.pk)
        if row is None:
            raise NotFoundError(f"dossier {dossier_id} row was deleted")
        return row

    # -- key plumbing -----------------------------------------------------------------

    def _next_version(self, dossier_id: int) -> int:
        version = self._versions.get(dossier_id, 0) + 1
        self._versions[dossier_id] = version
        return version

    def _receiver_public_key(self, receiver_id: str, fresh: bool = False) -> bytes:
        if not fresh and receiver_id in self._peer_keys:
            return self._peer_keys[receiver_id]
        try:
            key = self.backend.get_public_key(receiver_id)
        except NotFoundError as exc:
            raise NotFoundError(
                f"receiver {receiver_id!r} is not registered"
            ) from exc
        if self._peer_keys.get(receiver_id) != key:
            self._peer_keys[receiver_id] = key
            self._save_peer_keys()
        return key

    def _unwrap(self, record: WrappedKeyRecord) -> bytes:
        last_error: Exception | None = None
        for private in [self.keypair.private, *reversed(self.old_private_keys)]:
            try:
                return unwrap_key(record.wrapped_key, private)
            except WrongKeyError as exc:
                last_error = exc
        raise WrongKeyError(
            f"key for dossier {record.dossier_id} was wrapped for a keypair "
            f"this client no longer holds"
        ) from last_error

    def _fetch_key_record(self, dossier_id: int) -> WrappedKeyRecord:
        version = self._delivered_version.get(dossier_id)
        try:
            return self.backend.get_key(dossier_id, version)
        except KeyNotFoundError:
            if version is None:
                raise
            # The delivered version is gone (revoked, then granted again at a
            # later version): the latest record, if any, wraps the live key.
            record = self.backend.get_key(dossier_id, None)
            self._delivered_version[dossier_id] = record.key_version
            return record

    def _resolve_key(self, dossier_id: int) -> KeyAnswer:
        """Key resolver for the row store: revalidate online, cache offline."""
        try:
            record = self._fetch_key_record(dossier_id)
        except KeyNotFoundError:
            return KeyAnswer.revoked()
        except UnreachableError:
            cached = self.key_cache.get(dossier_id)
            if cached is not None:
                return KeyAnswer.available(cached[0])
            return KeyAnswer.unavailable()
        if not self._verify_key_record(record):
            logger.warning(
                "dossier %s: key record signature mismatch, refusing key",
                dossier_id,
            )
            return KeyAnswer.unavailable()
        try:
            key = self._unwrap(record)
        except WrongKeyError:
            return KeyAnswer.unavailable()
        self.key_cache[dossier_id] = (key, record.key_version)
        return KeyAnswer.available(key)

    def _verify_key_record(self, record: WrappedKeyRecord) -> bool:
        try:
            sender_pk = self._receiver_public_key(record.sender_id)
        except RowShareError:
            return False
        return verify(record.signing_bytes(), record.sender_signature, sender_pk)

    # -- the five sequences ---------------------------------------------------------------

    def grant(
        self,
        dossier_id: int,
        receiver_id: str,
        allowed_columns: set[str] | None = None,
        expiry: float | None = None,
    ) -> bool:
        """Give a receiver access; returns False if queued for retry."""
        row = self._own_row(dossier_id)
        pk_column = row.fields[0][0]
        if allowed_columns is None:
            allowed = frozenset(name for name, _ in row.fields)
        else:
            allowed = frozenset(allowed_columns)
            if pk_column not in allowed:
                raise ConfigError(
                    f"allowed columns must include the key column {pk_column!r}"
                )
            unknown = allowed - {name for name, _ in row.fields}
            if unknown:
                raise ConfigError(f"unknown columns in grant: {sorted(unknown)}")
        receiver_pk = self._receiver_public_key(receiver_id)

        current = self._dossier_keys.get(dossier_id)
        key = current[0] if current is not None else generate_row_key()
        version = self._next_version(dossier_id)
        self._dossier_keys[dossier_id] = (key, version)

        record = WrappedKeyRecord(
            dossier_id=dossier_id,
            key_version=version,
            sender_id=self.user_id,
            receiver_id=receiver_id,
            expiry=expiry,
            wrapped_key=wrap_key(key, receiver_pk),
        )
        record = record.signed(sign(record.signing_bytes(), self.keypair.private))
        self._record_grant(
            AccessGrant(dossier_id, receiver_id, allowed, version, expiry)
        )
        return self._deposit(("deposit_key", record))

    def send(self, dossier_id: int) -> bool:
        """Push the dossier's current row to every granted receiver.

        Rotates the dossier key first, so receivers revoked since the last
        send can never open this version.  Returns False if any deposit was
        queued for retry.
        """
        row = self._own_row(dossier_id)
        receivers = sorted(
            grant.receiver_id
            for (d, _), grant in self.grants.items()
            if d == dossier_id
        )
        if not receivers:
            raise NotFoundError(f"no grants exist for dossier {dossier_id}")

        key = generate_row_key()
        version = self._next_version(dossier_id)
        self._dossier_keys[dossier_id] = (key, version)

        delivered = True
        for receiver_id in receivers:
            grant = self.grants[(dossier_id, receiver_id)]
            receiver_pk = self._receiver_public_key(receiver_id)
            key_record = WrappedKeyRecord(
                dossier_id=dossier_id,
                key_version=version,
                sender_id=self.user_id,
                receiver_id=receiver_id,
                expiry=grant.expiry,
                wrapped_key=wrap_key(key, receiver_pk),
            )
            key_record = key_record.signed(
                sign(key_record.signing_bytes(), self.keypair.private)
            )
            payload = serialize_row(project(row, grant))
            pending = PendingRow(
                sender_id=self.user_id,
                receiver_id=receiver_id,
                dossier_id=dossier_id,
                key_version=version,
                encrypted_row=encrypt_row(payload, key).to_bytes(),
            )
            pending = pending.signed(
                sign(pending.signing_bytes(), self.keypair.private)
            )
            delivered = self._deposit(("deposit_key", key_record)) and delivered
            delivered = self._deposit(("send_row", pending)) and delivered
            self._record_grant(AccessGrant(
                dossier_id, receiver_id, grant.allowed_columns, version, grant.expiry
            ))
        return delivered

    def _deposit(self, item: tuple[str, object]) -> bool:
        if self.outbox:
            if not self.flush_outbox():
                self.outbox.append(item)
                return False
        kind, record = item
        try:
            if kind == "deposit_key":
                self.backend.deposit_key(record)
            else:
                self.backend.send_row(record)
        except UnreachableError:
            self.outbox.append(item)
            logger.warning("%s: synchronizer unreachable, queued %s", self.user_id, kind)
            return False
        return True

    def flush_outbox(self) -> bool:
        """Retry queued deposits in order; True when the outbox drains."""
        while self.outbox:
            kind, record = self.outbox[0]
            try:
                if kind == "deposit_key":
                    self.backend.deposit_key(record)
                else:
                    self.backend.send_row(record)
            except UnreachableError:
                return False
            self.outbox.pop(0)
        return True

    def receive(self) -> int:
        """Fetch pending rows, persist them encrypted, then acknowledge."""
        stored = 0
        ack_ids: list[int] = []
        while True:
            rows = self.backend.fetch_rows(ack_ids)
            if not rows:
                break
            ack_ids = []
            for row in rows:
                self.store.stage_encrypted(
                    row.dossier_id, hex_encode(row.encrypted_row)
                )
                self._delivered_version[row.dossier_id] = row.key_version
                stored += 1
                ack_ids.append(row.id_pending_row)
        return stored

    def use(self, dossier_id: int) -> Row:
        """Read one dossier's row, revalidating access while online."""
        if dossier_id in self.dossiers:
            return self._own_row(dossier_id)
        answer = self._resolve_key(dossier_id)
        if answer.status is KeyStatus.REVOKED:
            self.key_cache.pop(dossier_id, None)
            if (self.revoke_policy is RevokePolicy.DELETE_LOCAL
                    and dossier_id in set(self.store.shared_ids())):
                self.store.delete_shared(dossier_id)
            raise KeyNotFoundError(
                f"no key for dossier {dossier_id}: access revoked or never granted"
            )
        if answer.status is KeyStatus.UNAVAILABLE:
            raise KeyNotFoundError(
                f"key for dossier {dossier_id} is unavailable "
                f"(synchronizer unreachable and nothing cached)"
            )
        return self.store.load_pending(dossier_id, lambda _id: answer)

    def revoke(self, dossier_id: int, receiver_id: str) -> bool:
        """Withdraw a receiver's access; False when no such grant existed."""
        if (dossier_id, receiver_id) not in self.grants:
            logger.warning(
                "%s: revoke of nonexistent grant (%s, %s) ignored",
                self.user_id, dossier_id, receiver_id,
            )
            return False
        try:
            self.backend.delete_keys(dossier_id, receiver_id)
        except NotFoundError:
            pass  # nothing ever reached the synchronizer
        self._drop_grant(dossier_id, receiver_id)
        return True

    def request_resend(self, dossier_id: int) -> None:
        self.backend.resend_row(dossier_id)

    def poll_resends(self) -> int:
        """Handle queued resend requests; returns how many were honored."""
        honored = 0
        for dossier_id, receiver_id in self.backend.get_resend_requests():
            grant = self.grants.get((dossier_id, receiver_id))
            if grant is None:
                logger.warning(
                    "%s: refusing resend of dossier %s to %s (no grant)",
                    self.user_id, dossier_id, receiver_id,
                )
                continue
            self._resend_to(dossier_id, receiver_id)
            honored += 1
        return honored

    def _resend_to(self, dossier_id: int, receiver_id: str) -> None:
        """Re-deliver the current version to one receiver, new wrap, no rotation."""
        row = self._own_row(dossier_id)
        grant = self.grants[(dossier_id, receiver_id)]
        current = self._dossier_keys.get(dossier_id)
        if current is None:
            # Key lost (restart): rotate and fan out to everyone.
            self.send(dossier_id)
            return
        key, _ = current
        version = self._next_version(dossier_id)
        self._dossier_keys[dossier_id] = (key, version)
        receiver_pk = self._receiver_public_key(receiver_id, fresh=True)
        key_record = WrappedKeyRecord(
            dossier_id=dossier_id,
            key_version=version,
            sender_id=self.user_id,
            receiver_id=receiver_id,
            expiry=grant.expiry,
            wrapped_key=wrap_key(key, receiver_pk),
        )
        key_record = key_record.signed(
            sign(key_record.signing_bytes(), self.keypair.private)
        )
        payload = serialize_row(project(row, grant))
        pending = PendingRow(
            sender_id=self.user_id,
            receiver_id=receiver_id,
            dossier_id=dossier_id,
            key_version=version,
            encrypted_row=encrypt_row(payload, key).to_bytes(),
        )
        pending = pending.signed(sign(pending.signing_bytes(), self.keypair.private))
        self._deposit(("deposit_key", key_record))
        self._deposit(("send_row", pending))
        self._record_grant(AccessGrant(
            dossier_id, receiver_id, grant.allowed_columns, version, grant.expiry
        ))

    # -- keypair rotation ------------------------------------------------------------------

    def rotate_keypair(self, retain_old: bool = True) -> None:
        """Install a fresh keypair and publish the new public half.

        With ``retain_old`` the superseded private key stays usable for
        unwrapping keys that were wrapped before the rotation; without it,
        anything wrapped for the old key becomes unreadable here.
        """
        old_pair = self.keypair
        self.keypair = generate_keypair()
        if retain_old:
            self.old_private_keys.append(old_pair.private)
        else:
            self.old_private_keys = []
        self._write_keypair(self.keypair, self.old_private_keys)
        self.backend.update_public_key(self.keypair.public)

    # -- introspection -------------------------------------------------------------------------

    def receiver_phase(self, dossier_id: int) -> str:
        shared = set(self.store.shared_ids())
        pending = set(self.store.pending_ids())
        if dossier_id in shared - pending:
            return ReceiverPhase.DECRYPTED
        if dossier_id in pending:
            if dossier_id in self.key_cache:
                return ReceiverPhase.HAS_KEY
            return ReceiverPhase.HAS_CIPHERTEXT
        return ReceiverPhase.IDLE

    def shutdown(self) -> None:
        self.store.shutdown()
        self._compact_registries()
