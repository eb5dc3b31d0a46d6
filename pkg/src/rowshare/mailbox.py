"""Email-shaped synchronization: keys and rows travel as mailbox messages.

Three message kinds move between accounts, told apart by subject:

* ``PK``   -- the sender's public key.
* ``DK<n>``-- the key for dossier ``n``, wrapped for the recipient.
* ``PR<n>``-- dossier ``n``'s row, encrypted under that key.

The mailbox itself is a file-backed simulator: one directory per account,
one file per message.  It is deliberately a little more capable than a real
IMAP server (a sender may delete messages it previously sent), because key
withdrawal is the sender's job in this flow.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .crypto import (
    PUBLIC_LEN,
    KeyPair,
    encrypt_row,
    generate_row_key,
    hex_decode,
    hex_encode,
    unwrap_key,
    wrap_key,
)
from .errors import (
    ConfigError,
    CryptoError,
    HexFormatError,
    KeyExpiredError,
    KeyNotFoundError,
    NotFoundError,
    ProtocolError,
    RowShareError,
)
from .records import PendingRow, WrappedKeyRecord
from .rowstore import EncryptedRow, KeyAnswer, Store, parse_script_line

logger = logging.getLogger(__name__)

_SUBJECT_RE = re.compile(r"^(PK|DK([0-9]+)|PR([0-9]+))$")
_ACCOUNT_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_HEADER_RE = re.compile(r"^([a-z-]+): ?(.*)$")


def subject_kind(subject: str) -> tuple[str, int | None] | None:
    """Split a subject into its kind and dossier id; None if malformed."""
    match = _SUBJECT_RE.match(subject)
    if match is None:
        return None
    if match.group(2) is not None:
        return "DK", int(match.group(2))
    if match.group(3) is not None:
        return "PR", int(match.group(3))
    return "PK", None


@dataclass
class MailMessage:
    msg_id: int
    sender: str
    to: str
    subject: str
    body: bytes
    read_flag: bool = False
    meta: dict[str, str] = field(default_factory=dict)


class Mailbox:
    """File-backed message store: one directory per account, one file per message."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._next_id = 1 + max(
            (
                int(path.stem)
                for account in self.root.iterdir() if account.is_dir()
                for path in account.glob("*.msg")
            ),
            default=0,
        )

    # -- accounts -------------------------------------------------------------------

    def _account_dir(self, account: str) -> Path:
        if not _ACCOUNT_RE.match(account):
            raise ConfigError(f"bad account name: {account!r}")
        return self.root / account

    def ensure_account(self, account: str) -> None:
        self._account_dir(account).mkdir(exist_ok=True)

    def account_exists(self, account: str) -> bool:
        return self._account_dir(account).is_dir()

    def _existing(self, account: str) -> Path:
        path = self._account_dir(account)
        if not path.is_dir():
            raise NotFoundError(f"no mailbox account {account!r}")
        return path

    # -- message files --------------------------------------------------------------

    def _message_path(self, account: str, msg_id: int) -> Path:
        return self._existing(account) / f"{msg_id:012d}.msg"

    @staticmethod
    def _render(msg: MailMessage) -> str:
        lines = [
            f"id: {msg.msg_id}",
            f"from: {msg.sender}",
            f"to: {msg.to}",
            f"subject: {msg.subject}",
            f"read: {int(msg.read_flag)}",
        ]
        for key in sorted(msg.meta):
            lines.append(f"meta-{key.replace('_', '-')}: {msg.meta[key]}")
        lines.append("")
        lines.append(hex_encode(msg.body))
        return "\n".join(lines) + "\n"

    @staticmethod
    def _parse(text: str, path: Path) -> MailMessage:
        head, _, body_text = text.partition("\n\n")
        headers: dict[str, str] = {}
        for line in head.splitlines():
            match = _HEADER_RE.match(line)
            if match is None:
                raise ProtocolError(f"bad message header in {path.name}: {line!r}")
            headers[match.group(1)] = match.group(2)
        try:
            return MailMessage(
                msg_id=int(headers.pop("id")),
                sender=headers.pop("from"),
                to=headers.pop("to"),
                subject=headers.pop("subject"),
                body=hex_decode(body_text.strip()) if body_text.strip() else b"",
                read_flag=headers.pop("read") == "1",
                meta={
                    key[len("meta-"):].replace("-", "_"): value
                    for key, value in headers.items()
                    if key.startswith("meta-")
                },
            )
        except (KeyError, ValueError, HexFormatError) as exc:
            raise ProtocolError(f"unreadable message {path.name}: {exc}") from exc

    def _write(self, account: str, msg: MailMessage) -> None:
        path = self._existing(account) / f"{msg.msg_id:012d}.msg"
        path.write_text(self._render(msg), encoding="utf-8")

    # -- the mailbox interface --------------------------------------------------------

    def append(
        self,
        sender: str,
        to: str,
        subject: str,
        body: bytes,
        meta: dict[str, str] | None = None,
    ) -> int:
        if subject_kind(subject) is None:
            raise ProtocolError(f"bad subject: {subject!r}")
        with self._lock:
            self._existing(to)
            msg_id = self._next_id
            self._next_id += 1
            self._write(to, MailMessage(msg_id, sender, to, subject, body,
                                        False, dict(meta or {})))
            return msg_id

    def list(
        self,
        account: str,
        subject_prefix: str = "",
        unread_only: bool = False,
    ) -> list[MailMessage]:
        with self._lock:
            out = []
            for path in sorted(self._existing(account).glob("*.msg")):
                msg = self._parse(path.read_text(encoding="utf-8"), path)
                if not msg.subject.startswith(subject_prefix):
                    continue
                if unread_only and msg.read_flag:
                    continue
                out.append(msg)
            return out

    def fetch(self, account: str, msg_id: int) -> MailMessage:
        with self._lock:
            path = self._message_path(account, msg_id)
            if not path.exists():
                raise NotFoundError(f"no message {msg_id} in {account}'s mailbox")
            return self._parse(path.read_text(encoding="utf-8"), path)

    def delete(self, account: str, msg_id: int) -> None:
        with self._lock:
            path = self._message_path(account, msg_id)
            if not path.exists():
                raise NotFoundError(f"no message {msg_id} in {account}'s mailbox")
            path.unlink()

    def mark_read(self, account: str, msg_id: int) -> None:
        with self._lock:
            msg = self.fetch(account, msg_id)
            msg.read_flag = True
            self._write(account, msg)

    def delete_matching(self, account: str, sender: str, subject: str) -> int:
        """Remove `sender`'s messages with exactly `subject`; returns the count."""
        with self._lock:
            victims = [
                msg for msg in self.list(account, subject)
                if msg.subject == subject and msg.sender == sender
            ]
            for msg in victims:
                self.delete(account, msg.msg_id)
            return len(victims)

    def total_body_bytes(self, account: str) -> int:
        return sum(len(msg.body) for msg in self.list(account))


# -- queue size model ---------------------------------------------------------------------


@dataclass(frozen=True)
class QueueParams:
    """Inputs to the mailbox queue size estimate.

    Sizes are bytes; counts describe one synchronization moment: keys kept
    for already-read rows, brand-new collaborators, rows delivered but not
    yet read, and how many receivers each of those rows went to.
    """

    retained_keys: int = 0
    new_collaborators: int = 0
    fresh_rows: int = 0
    receivers_per_row: int = 0
    public_key_size: int = 0
    key_size: int = 0
    dossier_size: int = 0


def queue_size_model(params: QueueParams) -> int:
    """Total body bytes sitting in a mailbox for the given traffic shape.

    Retained key messages cost one key each; each new collaborator costs one
    public key; each unread row costs one wrapped key per receiver plus the
    encrypted row itself.
    """
    values = vars(params)
    negative = sorted(name for name, value in values.items() if value < 0)
    if negative:
        raise ConfigError(f"negative queue parameters: {negative}")
    return (
        params.retained_keys * params.key_size
        + params.new_collaborators * params.public_key_size
        + params.fresh_rows
        * (params.public_key_size * params.receivers_per_row + params.dossier_size)
    )


# -- the literal message flow ---------------------------------------------------------------


class MailboxClient:
    """One account's synchronization state over the mailbox.

    Keeps the three working structures: known collaborator public keys,
    unwrapped dossier keys (volatile, never persisted), and received
    still-encrypted rows waiting for their key.
    """

    def __init__(self, mailbox: Mailbox, account: str,
                 keypair: KeyPair, store: Store) -> None:
        self.mailbox = mailbox
        self.account = account
        self.keypair = keypair
        self.store = store
        self.pk_hash_map: dict[str, bytes] = {}
        self.dk_hash_map: dict[int, bytes] = {}
        self.pr_list: list[str] = []
        self.collaborators: dict[int, list[str]] = {}
        self.dossier_keys: dict[int, bytes] = {}
        self.dossier_rows: dict[int, bytes] = {}
        self.modified: set[int] = set()
        self.pk_announced: set[str] = set()
        mailbox.ensure_account(account)

    # -- owner side -------------------------------------------------------------------

    def add_collaborator(self, dossier_id: int, account: str, public_key: bytes) -> None:
        self.pk_hash_map[account] = public_key
        receivers = self.collaborators.setdefault(dossier_id, [])
        if account not in receivers:
            receivers.append(account)

    def set_dossier(self, dossier_id: int, payload: bytes) -> None:
        """Record this dossier's current row statement and mark it modified."""
        self.dossier_rows[dossier_id] = payload
        self.modified.add(dossier_id)

    def send_updates(self) -> None:
        """Push every modified dossier out: key per receiver, then the row.

        A fresh key is minted per modified dossier, and the stale key
        messages this account sent earlier are withdrawn first.  Public keys
        go out only to collaborators that never got one.
        """
        for dossier_id in sorted(self.modified):
            receivers = self.collaborators.get(dossier_id, [])
            for receiver in receivers:
                if receiver not in self.pk_announced:
                    self.mailbox.append(
                        self.account, receiver, "PK", self.keypair.public
                    )
                    self.pk_announced.add(receiver)
            key = generate_row_key()
            self.dossier_keys[dossier_id] = key
            for receiver in receivers:
                self.mailbox.delete_matching(
                    receiver, self.account, f"DK{dossier_id}"
                )
                self.mailbox.append(
                    self.account, receiver, f"DK{dossier_id}",
                    wrap_key(key, self.pk_hash_map[receiver]),
                )
            ciphertext = encrypt_row(self.dossier_rows[dossier_id], key).to_bytes()
            for receiver in receivers:
                self.mailbox.append(
                    self.account, receiver, f"PR{dossier_id}", ciphertext
                )
        self.modified.clear()

    def revoke(self, dossier_id: int, receiver: str) -> int:
        """Withdraw a collaborator: delete this account's key messages for them."""
        receivers = self.collaborators.get(dossier_id, [])
        if receiver in receivers:
            receivers.remove(receiver)
        return self.mailbox.delete_matching(receiver, self.account, f"DK{dossier_id}")

    # -- receiver side ---------------------------------------------------------------

    def receive_update(self, all_messages: bool = False) -> None:
        """Pull the mailbox and dispatch each message by its subject.

        Normally only unread messages are processed; after a restart the
        whole mailbox is re-read so the volatile key map fills back up.
        """
        for msg in self.mailbox.list(self.account, unread_only=not all_messages):
            kind = subject_kind(msg.subject)
            if kind is None:
                logger.warning("%s: unknown subject %r, message %d left unread",
                               self.account, msg.subject, msg.msg_id)
                continue
            if kind[0] == "PK":
                self.manage_pk(msg)
            elif kind[0] == "DK":
                self.manage_dk(msg)
            else:
                self.manage_pr(msg)

    def manage_pk(self, msg: MailMessage) -> None:
        """Store the sender's public key, then drop the message."""
        if len(msg.body) != PUBLIC_LEN:
            logger.error("%s: corrupt public key from %s (message %d kept)",
                         self.account, msg.sender, msg.msg_id)
            return
        self.pk_hash_map[msg.sender] = msg.body
        self.mailbox.delete(self.account, msg.msg_id)

    def manage_dk(self, msg: MailMessage) -> None:
        """Unwrap a dossier key into the volatile map; the message stays."""
        kind = subject_kind(msg.subject)
        assert kind is not None and kind[0] == "DK"
        try:
            key = unwrap_key(msg.body, self.keypair.private)
        except CryptoError:
            logger.warning("%s: cannot unwrap key message %d, skipped",
                           self.account, msg.msg_id)
            return
        self.dk_hash_map[kind[1]] = key
        self.mailbox.mark_read(self.account, msg.msg_id)

    def manage_pr(self, msg: MailMessage) -> None:
        """Queue the encrypted row for later decryption, drop the message."""
        kind = subject_kind(msg.subject)
        assert kind is not None and kind[0] == "PR"
        self.pr_list.append(f"${kind[1]}@{hex_encode(msg.body)}")
        self.mailbox.delete(self.account, msg.msg_id)

    def process_pr_list(self) -> int:
        """Decrypt queued rows whose key is known; the rest stay queued."""
        loaded = 0
        remaining: list[str] = []
        for line in self.pr_list:
            parsed = parse_script_line(line)
            assert isinstance(parsed, EncryptedRow)
            key = self.dk_hash_map.get(parsed.id)
            if key is None:
                remaining.append(line)
                continue
            self.store.stage_encrypted(parsed.id, parsed.hex_payload)
            self.store.load_pending(
                parsed.id, lambda _id, k=key: KeyAnswer.available(k)
            )
            loaded += 1
        self.pr_list = remaining
        return loaded


# -- the generic backend ------------------------------------------------------------------


class MailboxBackend:
    """Client backend that speaks the mailbox flow instead of a service.

    Signed key records and row records travel as messages; their metadata
    rides in message headers so the receiving client can verify them exactly
    as it would against the service.  Unlike the literal flow above, old key
    versions are retained until explicitly withdrawn, so a receiver can
    always fetch the key matching a delivery it already holds.
    """

    def __init__(self, mailbox: Mailbox, clock=time.time) -> None:
        self.mailbox = mailbox
        self.clock = clock
        self._user_id: str | None = None
        self._public_key: bytes | None = None

    def _me(self) -> str:
        if self._user_id is None:
            raise RowShareError("backend has no user yet; call ensure_user first")
        return self._user_id

    # -- directory ------------------------------------------------------------------

    def ensure_user(self, user_id: str, public_key: bytes, password: str) -> None:
        self.mailbox.ensure_account(user_id)
        self._user_id = user_id
        self._public_key = public_key
        self.mailbox.delete_matching(user_id, user_id, "PK")
        self.mailbox.append(user_id, user_id, "PK", public_key)

    def get_public_key(self, user_id: str) -> bytes:
        if not self.mailbox.account_exists(user_id):
            raise NotFoundError(f"unknown user {user_id!r}")
        own = [
            msg for msg in self.mailbox.list(user_id, "PK")
            if msg.subject == "PK" and msg.sender == user_id
        ]
        if not own:
            raise NotFoundError(f"user {user_id!r} has not published a key")
        return own[-1].body

    def update_public_key(self, public_key: bytes) -> None:
        me = self._me()
        self._public_key = public_key
        self.mailbox.delete_matching(me, me, "PK")
        self.mailbox.append(me, me, "PK", public_key)

    # -- keys ----------------------------------------------------------------------

    def _announce_pk(self, receiver_id: str) -> None:
        sent = [
            msg for msg in self.mailbox.list(receiver_id, "PK")
            if msg.subject == "PK" and msg.sender == self._me()
        ]
        if not sent and self._public_key is not None:
            self.mailbox.append(self._me(), receiver_id, "PK", self._public_key)

    def deposit_key(self, record: WrappedKeyRecord) -> None:
        me = self._me()
        if record.sender_id != me:
            raise RowShareError("cannot deposit a key in someone else's name")
        subject = f"DK{record.dossier_id}"
        self._announce_pk(record.receiver_id)
        for msg in self.mailbox.list(record.receiver_id, subject):
            if (msg.subject == subject and msg.sender == me
                    and msg.meta.get("key_version") == str(record.key_version)):
                self.mailbox.delete(record.receiver_id, msg.msg_id)
        meta = {
            "key_version": str(record.key_version),
            "signature": hex_encode(record.sender_signature),
        }
        if record.expiry is not None:
            meta["expiry"] = repr(record.expiry)
        self.mailbox.append(me, record.receiver_id, subject,
                            record.wrapped_key, meta)

    def delete_keys(self, dossier_id: int, receiver_id: str) -> int:
        me = self._me()
        count = self.mailbox.delete_matching(receiver_id, me, f"DK{dossier_id}")
        count += self.mailbox.delete_matching(receiver_id, me, f"PR{dossier_id}")
        if count == 0:
            raise NotFoundError(
                f"nothing to withdraw for dossier {dossier_id} from {receiver_id}"
            )
        return count

    def _record_from(self, msg: MailMessage, dossier_id: int) -> WrappedKeyRecord:
        expiry = msg.meta.get("expiry")
        return WrappedKeyRecord(
            dossier_id=dossier_id,
            key_version=int(msg.meta["key_version"]),
            sender_id=msg.sender,
            receiver_id=msg.to,
            expiry=None if expiry is None else float(expiry),
            wrapped_key=msg.body,
            sender_signature=hex_decode(msg.meta.get("signature", "")),
        )

    def get_key(self, dossier_id: int, key_version: int | None) -> WrappedKeyRecord:
        subject = f"DK{dossier_id}"
        records = [
            self._record_from(msg, dossier_id)
            for msg in self.mailbox.list(self._me(), subject)
            if msg.subject == subject
        ]
        if key_version is not None:
            records = [r for r in records if r.key_version == key_version]
        if not records:
            raise KeyNotFoundError(
                f"no key for dossier {dossier_id}"
                + (f" version {key_version}" if key_version is not None else "")
            )
        best = max(records, key=lambda r: r.key_version)
        if best.expiry is not None and self.clock() > best.expiry:
            raise KeyExpiredError(f"key for dossier {dossier_id} expired")
        return best

    # -- rows ----------------------------------------------------------------------

    def send_row(self, row: PendingRow) -> int:
        me = self._me()
        if row.sender_id != me:
            raise RowShareError("cannot send a row in someone else's name")
        subject = f"PR{row.dossier_id}"
        for msg in self.mailbox.list(row.receiver_id, subject):
            if (msg.subject == subject and msg.sender == me
                    and msg.meta.get("key_version") == str(row.key_version)):
                self.mailbox.delete(row.receiver_id, msg.msg_id)
        return self.mailbox.append(
            me, row.receiver_id, subject, row.encrypted_row,
            {
                "key_version": str(row.key_version),
                "signature": hex_encode(row.sender_signature),
            },
        )

    def fetch_rows(self, ack_ids: list[int]) -> list[PendingRow]:
        me = self._me()
        for msg_id in ack_ids:
            try:
                self.mailbox.delete(me, msg_id)
            except NotFoundError:
                pass
        rows = []
        for msg in self.mailbox.list(me, "PR"):
            kind = subject_kind(msg.subject)
            if kind is None or kind[0] != "PR":
                continue
            rows.append(PendingRow(
                sender_id=msg.sender,
                receiver_id=me,
                dossier_id=kind[1],
                key_version=int(msg.meta["key_version"]),
                encrypted_row=msg.body,
                sender_signature=hex_decode(msg.meta.get("signature", "")),
                id_pending_row=msg.msg_id,
            ))
        return rows

    # -- resends -------------------------------------------------------------------

    def resend_row(self, dossier_id: int) -> None:
        raise RowShareError(
            "resend requests do not travel over the mailbox flow; "
            "ask the owner out of band"
        )

    def get_resend_requests(self) -> list[tuple[int, str]]:
        return []
