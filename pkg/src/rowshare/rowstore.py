"""In-memory table store with line-oriented text persistence.

Owned rows persist as plain INSERT-style statements; rows shared by someone
else persist as ``$<id>@<HEX>`` ciphertext lines.  Two files back a store: a
snapshot written on clean shutdown and an append-only journal that receives
every mutation first (write-ahead).  On open the snapshot is loaded, the
journal replayed on top (INSERT acts as upsert during replay), and each
surviving ciphertext line is resolved through a key resolver exactly once.

Ciphertext lines whose key is unavailable stay on disk untouched; lines that
fail to decode or authenticate are quarantined but also kept.  A store with
zero shared rows serializes byte-identically to one that never heard of
encryption, which is what makes the plain benchmark baseline honest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

from .crypto import Ciphertext, decrypt_row, hex_decode, hex_encode
from .errors import (
    DuplicateRowError,
    DuplicateTableError,
    HexFormatError,
    IntegrityError,
    KeyNotFoundError,
    MissingRowError,
    ScriptFormatError,
    StoreError,
    UnknownTableError,
    WrongKeyError,
)

MAX_HEADER_ID = 2**64 - 1
_HEX_CHARS = frozenset("0123456789ABCDEF")
_IDENT_FIRST = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_REST = _IDENT_FIRST | frozenset("0123456789")


class Origin(Enum):
    OWNED = "owned"
    SHARED = "shared"


class RevokePolicy(Enum):
    """What happens to local ciphertext once access is revoked."""

    KEEP_CACHED = "keep_cached"
    DELETE_LOCAL = "delete_local"


class KeyStatus(Enum):
    AVAILABLE = "available"
    UNAVAILABLE = "unavailable"
    REVOKED = "revoked"


@dataclass(frozen=True)
class KeyAnswer:
    """Resolver verdict for one shared-row id."""

    status: KeyStatus
    key: bytes | None = None

    @classmethod
    def available(cls, key: bytes) -> KeyAnswer:
        return cls(KeyStatus.AVAILABLE, key)

    @classmethod
    def unavailable(cls) -> KeyAnswer:
        return cls(KeyStatus.UNAVAILABLE)

    @classmethod
    def revoked(cls) -> KeyAnswer:
        return cls(KeyStatus.REVOKED)


KeyResolver = Callable[[int], KeyAnswer]


@dataclass(frozen=True)
class Row:
    """One table row; field values are text, in declared column order."""

    table: str
    pk: str
    fields: tuple[tuple[str, str], ...]
    origin: Origin = Origin.OWNED
    shared_id: int | None = None

    def value(self, column: str) -> str:
        for name, val in self.fields:
            if name == column:
                return val
        raise KeyError(column)


@dataclass(frozen=True)
class PlainStatement:
    text: str


@dataclass(frozen=True)
class EncryptedRow:
    id: int
    hex_payload: str


ScriptLine = PlainStatement | EncryptedRow


@dataclass
class OpenReport:
    """What open() found: load counts, retained ids, trouble."""

    plain_loaded: int = 0
    shared_loaded: int = 0
    shared_decrypts: int = 0
    owned_decrypts: int = 0
    retained_ids: list[int] = field(default_factory=list)
    revoked_ids: list[int] = field(default_factory=list)
    dropped_ids: list[int] = field(default_factory=list)
    quarantined_ids: list[int] = field(default_factory=list)


@dataclass
class Table:
    name: str
    columns: list[str]
    declared: bool
    rows: dict[str, Row] = field(default_factory=dict)


def _validate_identifier(name: str, what: str) -> None:
    if not name or name[0] not in _IDENT_FIRST or any(
        c not in _IDENT_REST for c in name
    ):
        raise ScriptFormatError(f"invalid {what} name: {name!r}")


def _validate_value(text: str) -> None:
    for c in text:
        if ord(c) < 0x20:
            raise ScriptFormatError(
                f"control character {c!r} not allowed in field values"
            )


def _quote(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


def parse_script_line(line: str) -> ScriptLine:
    """Classify one persisted line.

    Anything starting with ``$`` must be a well-formed ciphertext header:
    decimal id, ``@``, then an uppercase-hex payload.  Everything else is a
    plain statement, interpreted later.
    """
    if not line:
        raise ScriptFormatError("empty line")
    if not line.startswith("$"):
        return PlainStatement(line)
    at = line.find("@")
    if at < 0:
        raise ScriptFormatError(f"ciphertext line without '@': {line[:40]!r}")
    id_text = line[1:at]
    payload = line[at + 1:]
    if not id_text or not id_text.isascii() or not id_text.isdigit():
        raise ScriptFormatError(f"bad ciphertext id: {id_text!r}")
    row_id = int(id_text)
    if row_id > MAX_HEADER_ID:
        raise ScriptFormatError(f"ciphertext id out of range: {row_id}")
    if not payload:
        raise ScriptFormatError("empty ciphertext payload")
    bad = set(payload) - _HEX_CHARS
    if bad:
        raise ScriptFormatError(
            f"non-hex character {sorted(bad)[0]!r} in ciphertext payload"
        )
    return EncryptedRow(row_id, payload)


def render_encrypted_line(row_id: int, ct: Ciphertext) -> str:
    """Disk form of an encrypted row: ``$<id>@<HEX>``."""
    if not 0 <= row_id <= MAX_HEADER_ID:
        raise ScriptFormatError(f"ciphertext id out of range: {row_id}")
    return f"${row_id}@{hex_encode(ct.to_bytes())}"


def serialize_row(row: Row) -> bytes:
    """Canonical statement text for a row, as UTF-8 bytes.

    Deterministic: declared column order, every value quoted, quotes doubled.
    This is both the disk form of owned rows and the plaintext that gets
    encrypted for shared ones, so it must stay stable across versions.
    """
    cols = ",".join(name for name, _ in row.fields)
    vals = ",".join(_quote(val) for _, val in row.fields)
    return f"INSERT INTO {row.table}({cols}) VALUES({vals})".encode()


def deserialize_row(
    data: bytes,
    origin: Origin = Origin.OWNED,
    shared_id: int | None = None,
) -> Row:
    """Inverse of serialize_row; also accepts the looser on-disk variants."""
    try:
        text = data.decode()
    except UnicodeDecodeError as exc:
        raise ScriptFormatError(f"row bytes are not UTF-8: {exc}") from exc
    parsed = _parse_insert(text)
    if parsed is None:
        raise ScriptFormatError(f"not an INSERT statement: {text[:60]!r}")
    table, columns, values = parsed
    if not values:
        raise ScriptFormatError("INSERT with no values")
    fields = tuple(zip(columns, values))
    return Row(
        table=table,
        pk=values[0],
        fields=fields,
        origin=origin,
        shared_id=shared_id,
    )


def _split_quoted_values(text: str, stmt: str) -> list[str]:
    """Tokenize a VALUES(...) interior: quoted or bare items, comma-separated.

    Quoted values use doubled-quote escaping; bare values run to the next
    comma and get stripped (covers unquoted numerics in legacy statements).
    """
    values: list[str] = []
    i, n = 0, len(text)
    while True:
        if i >= n:
            raise ScriptFormatError(f"missing value in statement: {stmt[:60]!r}")
        if text[i] == "'":
            buf: list[str] = []
            i += 1
            while True:
                if i >= n:
                    raise ScriptFormatError(
                        f"unterminated quoted value: {stmt[:60]!r}"
                    )
                c = text[i]
                if c == "'":
                    if i + 1 < n and text[i + 1] == "'":
                        buf.append("'")
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(c)
                i += 1
            values.append("".join(buf))
        else:
            j = i
            while j < n and text[j] != ",":
                j += 1
            token = text[i:j].strip()
            if "'" in token:
                raise ScriptFormatError(
                    f"stray quote in bare value: {stmt[:60]!r}"
                )
            values.append(token)
            i = j
        if i >= n:
            return values
        if text[i] != ",":
            raise ScriptFormatError(
                f"expected ',' after value in: {stmt[:60]!r}"
            )
        i += 1


def _parse_insert(text: str) -> tuple[str, list[str], list[str]] | None:
    if not text.startswith("INSERT INTO "):
        return None
    rest = text[len("INSERT INTO "):]
    if rest.endswith(";"):
        rest = rest[:-1]
    open_paren = rest.find("(")
    if open_paren < 0:
        raise ScriptFormatError(f"INSERT without column list: {text[:60]!r}")
    table = rest[:open_paren].strip()
    _validate_identifier(table, "table")
    close_paren = rest.find(")", open_paren)
    if close_paren < 0:
        raise ScriptFormatError(f"unclosed column list: {text[:60]!r}")
    columns = [c.strip() for c in rest[open_paren + 1:close_paren].split(",")]
    for col in columns:
        _validate_identifier(col, "column")
    tail = rest[close_paren + 1:].lstrip()
    if not tail.startswith("VALUES(") or not tail.endswith(")"):
        raise ScriptFormatError(f"INSERT without VALUES(...): {text[:60]!r}")
    interior = tail[len("VALUES("):-1]
    values = _split_quoted_values(interior, text)
    if len(values) != len(columns):
        raise ScriptFormatError(
            f"{len(columns)} columns but {len(values)} values: {text[:60]!r}"
        )
    return table, columns, values


def _parse_create(text: str) -> tuple[str, list[str]] | None:
    if not text.startswith("CREATE TABLE "):
        return None
    rest = text[len("CREATE TABLE "):]
    if rest.endswith(";"):
        rest = rest[:-1]
    open_paren = rest.find("(")
    if open_paren < 0 or not rest.endswith(")"):
        raise ScriptFormatError(f"malformed CREATE TABLE: {text[:60]!r}")
    table = rest[:open_paren].strip()
    _validate_identifier(table, "table")
    columns = [c.strip() for c in rest[open_paren + 1:-1].split(",")]
    for col in columns:
        _validate_identifier(col, "column")
    return table, columns


def _parse_delete(text: str) -> tuple[str, str] | None:
    if not text.startswith("DELETE FROM "):
        return None
    rest = text[len("DELETE FROM "):]
    if rest.endswith(";"):
        rest = rest[:-1]
    where = rest.find(" WHERE ")
    if where < 0:
        raise ScriptFormatError(f"DELETE without WHERE: {text[:60]!r}")
    table = rest[:where].strip()
    _validate_identifier(table, "table")
    cond = rest[where + len(" WHERE "):]
    eq = cond.find("=")
    if eq < 0:
        raise ScriptFormatError(f"DELETE without '=': {text[:60]!r}")
    values = _split_quoted_values(cond[eq + 1:], text)
    if len(values) != 1:
        raise ScriptFormatError(f"DELETE with multiple values: {text[:60]!r}")
    return table, values[0]


def _parse_delete_shared(text: str) -> int | None:
    if not text.startswith("DELETE SHARED "):
        return None
    id_text = text[len("DELETE SHARED "):].strip().rstrip(";")
    if not id_text.isascii() or not id_text.isdigit():
        raise ScriptFormatError(f"bad DELETE SHARED id: {id_text!r}")
    return int(id_text)


def _natural_pk(pk: str) -> tuple[int, int | str]:
    if pk.isascii() and pk.isdigit():
        return (0, int(pk))
    return (1, pk)


class Store:
    """One client's tables, backed by a snapshot file and a journal file."""

    def __init__(
        self,
        snapshot_path: str | os.PathLike[str],
        journal_path: str | os.PathLike[str],
        revoke_policy: RevokePolicy = RevokePolicy.KEEP_CACHED,
    ) -> None:
        self.snapshot_path = Path(snapshot_path)
        self.journal_path = Path(journal_path)
        self.revoke_policy = revoke_policy
        self.tables: dict[str, Table] = {}
        # Latest ciphertext per shared id: loaded rows keep theirs here too,
        # so shutdown can re-emit without any key material present.
        self._shared_cipher: dict[int, str] = {}
        self._shared_rows: dict[int, tuple[str, str]] = {}  # id -> (table, pk)
        self._pending: dict[int, str] = {}
        self._quarantined: dict[int, str] = {}
        self.open_report = OpenReport()
        self._journal = None
        self._closed = False

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def open(
        cls,
        snapshot_path: str | os.PathLike[str],
        journal_path: str | os.PathLike[str],
        key_resolver: KeyResolver | None = None,
        revoke_policy: RevokePolicy = RevokePolicy.KEEP_CACHED,
    ) -> Store:
        """Load snapshot, replay journal, resolve ciphertext lines once each."""
        store = cls(snapshot_path, journal_path, revoke_policy)
        resolver = key_resolver or (lambda _id: KeyAnswer.unavailable())
        report = store.open_report

        latest: dict[int, str] = {}
        store._replay_file(store.snapshot_path, latest, tolerate_torn_tail=False)
        store._replay_file(store.journal_path, latest, tolerate_torn_tail=True)

        for row_id in sorted(latest):
            payload = latest[row_id]
            answer = resolver(row_id)
            if answer.status is KeyStatus.AVAILABLE:
                try:
                    store._load_ciphertext(row_id, payload, answer.key)
                except (HexFormatError, IntegrityError, WrongKeyError,
                        ScriptFormatError, DuplicateRowError):
                    store._quarantined[row_id] = payload
                    report.quarantined_ids.append(row_id)
                else:
                    report.shared_loaded += 1
                    report.shared_decrypts += 1
            elif answer.status is KeyStatus.UNAVAILABLE:
                store._pending[row_id] = payload
                report.retained_ids.append(row_id)
            else:
                report.revoked_ids.append(row_id)
                if revoke_policy is RevokePolicy.DELETE_LOCAL:
                    report.dropped_ids.append(row_id)
                else:
                    store._pending[row_id] = payload
                    report.retained_ids.append(row_id)

        store._open_journal()
        return store

    def _replay_file(
        self,
        path: Path,
        latest: dict[int, str],
        tolerate_torn_tail: bool,
    ) -> None:
        if not path.exists():
            return
        text = path.read_text(encoding="utf-8")
        if not text:
            return
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        elif tolerate_torn_tail:
            lines.pop()  # partial trailing write from a crash
        elif lines:
            raise ScriptFormatError(f"{path.name}: missing final newline")
        for line in lines:
            parsed = parse_script_line(line)
            if isinstance(parsed, EncryptedRow):
                latest[parsed.id] = parsed.hex_payload
                continue
            self._apply_statement(parsed.text, latest)

    def _apply_statement(self, text: str, latest: dict[int, str]) -> None:
        created = _parse_create(text)
        if created is not None:
            name, columns = created
            if name in self.tables:
                raise DuplicateTableError(f"table {name} declared twice")
            self.tables[name] = Table(name, columns, declared=True)
            return
        shared_delete = _parse_delete_shared(text)
        if shared_delete is not None:
            latest.pop(shared_delete, None)
            return
        deleted = _parse_delete(text)
        if deleted is not None:
            table, pk = deleted
            tab = self.tables.get(table)
            if tab is None or tab.rows.pop(pk, None) is None:
                raise MissingRowError(f"DELETE of absent row {table}/{pk}")
            return
        inserted = _parse_insert(text)
        if inserted is not None:
            table, columns, values = inserted
            tab = self.tables.get(table)
            if tab is None:
                raise UnknownTableError(f"INSERT into undeclared table {table}")
            if columns != tab.columns:
                raise ScriptFormatError(
                    f"column list mismatch for {table}: {columns}"
                )
            row = Row(table, values[0], tuple(zip(columns, values)))
            # Journal replay treats INSERT as upsert: an update is journaled
            # as a fresh INSERT for the same pk.
            tab.rows[row.pk] = row
            self.open_report.plain_loaded += 1
            return
        raise ScriptFormatError(f"unrecognized statement: {text[:60]!r}")

    def _load_ciphertext(self, row_id: int, payload: str, key: bytes) -> None:
        blob = hex_decode(payload)
        ct = Ciphertext.from_bytes(blob)
        plaintext = decrypt_row(ct, key)
        row = deserialize_row(plaintext, Origin.SHARED, row_id)
        self._insert_shared_row(row, row_id, payload)

    def _insert_shared_row(self, row: Row, row_id: int, payload: str) -> None:
        names = [name for name, _ in row.fields]
        tab = self.tables.get(row.table)
        if tab is None:
            # Shared-only tables materialize from the data; they are not
            # re-declared in the snapshot (the ciphertext line is the record).
            tab = Table(row.table, names, declared=False)
            self.tables[row.table] = tab
        elif tab.declared:
            unknown = [name for name in names if name not in tab.columns]
            if unknown:
                raise ScriptFormatError(
                    f"shared row brings columns {unknown} that table "
                    f"{row.table} does not declare"
                )
        else:
            # Grants may project different column subsets of one origin
            # table; the materialized table widens to their union.
            tab.columns.extend(name for name in names if name not in tab.columns)
        if row.pk in tab.rows:
            raise DuplicateRowError(
                f"shared row collides with existing pk {row.table}/{row.pk}"
            )
        tab.rows[row.pk] = row
        self._shared_rows[row_id] = (row.table, row.pk)
        self._shared_cipher[row_id] = payload

    def _open_journal(self) -> None:
        self._journal = open(self.journal_path, "a", encoding="utf-8")

    def _append_journal(self, line: str) -> None:
        if self._closed:
            raise StoreError("store is shut down")
        if self._journal is None:
            self._open_journal()
        self._journal.write(line + "\n")
        self._journal.flush()

    # -- schema and owned-row mutations ---------------------------------------

    def create_table(self, name: str, columns: list[str]) -> None:
        _validate_identifier(name, "table")
        if not columns:
            raise ScriptFormatError("table needs at least one column")
        for col in columns:
            _validate_identifier(col, "column")
        existing = self.tables.get(name)
        if existing is not None and existing.declared:
            raise DuplicateTableError(f"table {name} already exists")
        if existing is not None:
            missing = [col for col in existing.columns if col not in columns]
            if missing:
                raise ScriptFormatError(
                    f"table {name} already holds shared rows with columns "
                    f"{existing.columns}"
                )
            existing.columns = list(columns)
            existing.declared = True
        else:
            self.tables[name] = Table(name, list(columns), declared=True)
        self._append_journal(f"CREATE TABLE {name}({','.join(columns)})")

    def _declared_table(self, table: str) -> Table:
        tab = self.tables.get(table)
        if tab is None:
            raise UnknownTableError(f"no such table: {table}")
        return tab

    def insert(self, table: str, values: list[str]) -> Row:
        tab = self._declared_table(table)
        if len(values) != len(tab.columns):
            raise ScriptFormatError(
                f"{table} has {len(tab.columns)} columns, got {len(values)} values"
            )
        for val in values:
            _validate_value(val)
        row = Row(table, values[0], tuple(zip(tab.columns, values)))
        if row.pk in tab.rows:
            raise DuplicateRowError(f"duplicate pk {table}/{row.pk}")
        self._append_journal(serialize_row(row).decode())
        tab.rows[row.pk] = row
        return row

    def update(self, table: str, pk: str, values: list[str]) -> Row:
        tab = self._declared_table(table)
        old = tab.rows.get(pk)
        if old is None:
            raise MissingRowError(f"no row {table}/{pk}")
        if old.origin is Origin.SHARED:
            raise StoreError("shared rows are read-only at the receiver")
        if len(values) != len(tab.columns):
            raise ScriptFormatError(
                f"{table} has {len(tab.columns)} columns, got {len(values)} values"
            )
        if values[0] != pk:
            raise ScriptFormatError("update must keep the primary key")
        for val in values:
            _validate_value(val)
        row = Row(table, pk, tuple(zip(tab.columns, values)))
        self._append_journal(serialize_row(row).decode())
        tab.rows[pk] = row
        return row

    def delete(self, table: str, pk: str) -> None:
        tab = self._declared_table(table)
        row = tab.rows.get(pk)
        if row is None:
            raise MissingRowError(f"no row {table}/{pk}")
        if row.origin is Origin.SHARED:
            raise StoreError("use delete_shared() for shared rows")
        self._append_journal(f"DELETE FROM {table} WHERE {tab.columns[0]}={_quote(pk)}")
        del tab.rows[pk]

    # -- shared-row handling ---------------------------------------------------

    def stage_encrypted(self, row_id: int, hex_payload: str) -> None:
        """Record fetched ciphertext for later decryption.

        Persists immediately; any previously loaded row under the same id is
        evicted because its plaintext no longer matches the latest version.
        """
        line = f"${row_id}@{hex_payload}"
        parsed = parse_script_line(line)
        if not isinstance(parsed, EncryptedRow):
            raise ScriptFormatError("payload did not parse as ciphertext")
        self._append_journal(line)
        self._evict_shared(row_id)
        self._quarantined.pop(row_id, None)
        self._pending[row_id] = hex_payload

    def _evict_shared(self, row_id: int) -> None:
        place = self._shared_rows.pop(row_id, None)
        if place is not None:
            table, pk = place
            self.tables[table].rows.pop(pk, None)
        self._shared_cipher.pop(row_id, None)
        self._pending.pop(row_id, None)

    def load_pending(self, row_id: int, key_resolver: KeyResolver) -> Row:
        """Decrypt one staged ciphertext line and load it as a shared row."""
        payload = self._pending.get(row_id)
        if payload is None:
            if row_id in self._shared_rows:
                table, pk = self._shared_rows[row_id]
                return self.tables[table].rows[pk]
            raise MissingRowError(f"no staged ciphertext for id {row_id}")
        answer = key_resolver(row_id)
        if answer.status is KeyStatus.REVOKED:
            if self.revoke_policy is RevokePolicy.DELETE_LOCAL:
                self.delete_shared(row_id)
            raise KeyNotFoundError(f"key for shared row {row_id} was revoked")
        if answer.status is KeyStatus.UNAVAILABLE:
            raise KeyNotFoundError(f"no key available for shared row {row_id}")
        del self._pending[row_id]
        try:
            self._load_ciphertext(row_id, payload, answer.key)
        except (HexFormatError, IntegrityError, WrongKeyError,
                ScriptFormatError, DuplicateRowError):
            self._quarantined[row_id] = payload
            self.open_report.quarantined_ids.append(row_id)
            raise
        table, pk = self._shared_rows[row_id]
        return self.tables[table].rows[pk]

    def delete_shared(self, row_id: int) -> None:
        """Drop a shared row and its ciphertext from memory and disk."""
        known = (
            row_id in self._shared_rows
            or row_id in self._pending
            or row_id in self._quarantined
        )
        if not known:
            raise MissingRowError(f"no shared row with id {row_id}")
        self._append_journal(f"DELETE SHARED {row_id}")
        self._evict_shared(row_id)
        self._quarantined.pop(row_id, None)

    def shared_ids(self) -> list[int]:
        return sorted(set(self._shared_rows) | set(self._pending))

    def pending_ids(self) -> list[int]:
        return sorted(self._pending)

    # -- reads -----------------------------------------------------------------

    def get(self, table: str, pk: str) -> Row | None:
        tab = self.tables.get(table)
        if tab is None:
            return None
        return tab.rows.get(pk)

    def scan(self, table: str) -> Iterator[Row]:
        tab = self.tables.get(table)
        if tab is None:
            raise UnknownTableError(f"no such table: {table}")
        for pk in sorted(tab.rows, key=_natural_pk):
            yield tab.rows[pk]

    # -- shutdown ----------------------------------------------------------------

    def shutdown(self) -> None:
        """Write the snapshot, truncate the journal, close the store.

        The snapshot lands via a temp file and rename; the journal is only
        truncated after the snapshot is safely in place, so a failure keeps
        the journal and the previous snapshot as the recovery source.
        """
        if self._closed:
            return
        tmp = self.snapshot_path.with_name(self.snapshot_path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for name in sorted(self.tables):
                tab = self.tables[name]
                if tab.declared:
                    fh.write(f"CREATE TABLE {name}({','.join(tab.columns)})\n")
            for name in sorted(self.tables):
                tab = self.tables[name]
                for pk in sorted(tab.rows, key=_natural_pk):
                    row = tab.rows[pk]
                    if row.origin is Origin.OWNED:
                        fh.write(serialize_row(row).decode() + "\n")
            emitted = dict(self._shared_cipher)
            emitted.update(self._pending)
            emitted.update(self._quarantined)
            for row_id in sorted(emitted):
                fh.write(f"${row_id}@{emitted[row_id]}\n")
        os.replace(tmp, self.snapshot_path)
        if self._journal is not None:
            self._journal.close()
            self._journal = None
        open(self.journal_path, "w").close()
        self._closed = True
