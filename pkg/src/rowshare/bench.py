"""Benchmark harness: encrypted sharing versus a plain-store baseline.

Five sequential phases run over a synthetic workload of fixed-size dossiers:

* create    -- open stores; encrypted runs also start the in-process
               synchronizer and register every client.
* populate  -- the owner inserts ``num_dossiers`` rows.
* share     -- grant plus send for every shared dossier (encrypted only).
* receive   -- each receiver drains its pending queue.
* open      -- every store is shut down, reopened, and fully read; shared
               rows are decrypted here, one decryption per shared row.

The plain baseline runs the same store code with no synchronizer and no
cryptography: instead of sharing, each receiver inserts the rows it would
have received as owned data, so both modes finish at the same total row
count.  The share phase has no plain analogue (the baseline transports
nothing), so ``overhead_pct`` compares the four phases both modes execute
(create, populate, receive, open) and the share-phase duration is reported
separately beside it rather than folded into the comparison.

Durations are medians over ``repeats`` fresh runs, measured with
``time.monotonic``.  Primitive-operation counts are ``crypto.COUNTERS``
deltas captured on the first run; the workload is derived from ``seed``, so
reruns measure identical content.  Each run's total payload must fit one
wire response: receivers fetch their whole backlog in a single batch.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import random
import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from .client import ClientAgent, ServiceBackend
from .crypto import COUNTERS, CryptoCounters
from .errors import ConfigError
from .rowstore import Store
from .synchronizer import SynchronizerService
from .wire import LocalTransport

logger = logging.getLogger(__name__)

PHASES = ("create", "populate", "share", "receive", "open")

TABLE = "bench"
COLUMNS = ["id", "payload"]

ENCRYPTED = "encrypted"
PLAIN = "plain"


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark workload; ``mode`` picks the pipeline under test."""

    num_dossiers: int
    pct_shared: float
    mode: str = ENCRYPTED
    dossier_size_bytes: int = 200
    num_clients: int = 2
    receivers_per_dossier: int = 1
    repeats: int = 3
    seed: int = 0

    @property
    def shared_count(self) -> int:
        return round(self.num_dossiers * self.pct_shared / 100)


def _validate(config: BenchConfig) -> None:
    if config.num_dossiers < 1:
        raise ConfigError("num_dossiers must be at least 1")
    if not 0 <= config.pct_shared <= 100:
        raise ConfigError("pct_shared must be between 0 and 100")
    if config.mode not in (ENCRYPTED, PLAIN):
        raise ConfigError(f"mode must be {ENCRYPTED!r} or {PLAIN!r}")
    if config.dossier_size_bytes < 16:
        raise ConfigError("dossier_size_bytes must be at least 16")
    if config.num_clients < 1:
        raise ConfigError("num_clients must be at least 1")
    if config.repeats < 1:
        raise ConfigError("repeats must be at least 1")
    if config.receivers_per_dossier < 1:
        raise ConfigError("receivers_per_dossier must be at least 1")
    if config.shared_count > 0:
        if config.num_clients < 2:
            raise ConfigError("sharing needs num_clients >= 2")
        if config.receivers_per_dossier > config.num_clients - 1:
            raise ConfigError(
                "receivers_per_dossier cannot exceed the receiver count "
                f"({config.num_clients - 1})"
            )


@dataclass(frozen=True)
class BenchReport:
    """Median phase durations plus primitive counts for one config."""

    config: BenchConfig
    seconds: dict[str, float]
    counters: dict[str, CryptoCounters]
    rows_read: int
    overhead_pct: float | None = None

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds[name] for name in PHASES)

    @property
    def comparable_seconds(self) -> float:
        """Duration of the phases that exist in both modes (share excluded)."""
        return self.total_seconds - self.seconds["share"]

    def counter_total(self, name: str) -> int:
        return sum(getattr(delta, name) for delta in self.counters.values())


# -- workload construction ---------------------------------------------------------


def _payloads(config: BenchConfig) -> list[tuple[str, str]]:
    """Deterministic (pk, payload) pairs sized to dossier_size_bytes."""
    rng = random.Random(config.seed)
    length = max(1, config.dossier_size_bytes - 8)
    out = []
    for i in range(1, config.num_dossiers + 1):
        payload = f"{rng.getrandbits(length * 4):0{length}x}"
        out.append((f"d{i:07d}", payload))
    return out


def _receiver_names(config: BenchConfig) -> list[str]:
    return [f"recv{i}" for i in range(1, config.num_clients)]


def _assignments(config: BenchConfig) -> dict[str, list[int]]:
    """Round-robin map of receiver name to the dossier ids it is granted."""
    names = _receiver_names(config)
    out: dict[str, list[int]] = {name: [] for name in names}
    for dossier in range(1, config.shared_count + 1):
        for j in range(config.receivers_per_dossier):
            name = names[(dossier - 1 + j) % len(names)]
            out[name].append(dossier)
    return out


class _Stopwatch:
    """Accumulates per-phase wall time and per-phase counter deltas."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = dict.fromkeys(PHASES, 0.0)
        self.counters: dict[str, CryptoCounters] = {
            name: CryptoCounters() for name in PHASES
        }
        self._phase: str | None = None
        self._started = 0.0
        self._counters_at = COUNTERS.snapshot()

    def start(self, phase: str) -> None:
        assert self._phase is None, "phase already running"
        self._phase = phase
        self._counters_at = COUNTERS.snapshot()
        self._started = time.monotonic()

    def stop(self) -> None:
        elapsed = time.monotonic() - self._started
        assert self._phase is not None, "no phase running"
        self.seconds[self._phase] += elapsed
        self.counters[self._phase] = COUNTERS.snapshot().since(self._counters_at)
        self._phase = None


def _scan_all(store: Store) -> int:
    """Read every visible row; returns how many were touched."""
    count = 0
    for name in store.tables:
        for row in store.scan(name):
            assert row.fields is not None
            count += 1
    return count


# -- single runs -------------------------------------------------------------------


def _run_encrypted(config: BenchConfig, base: Path, watch: _Stopwatch) -> int:
    shared = config.shared_count
    rows = _payloads(config)
    assigned = _assignments(config) if shared else {}
    receiver_names = [name for name, ids in assigned.items() if ids]

    # With nothing shared the synchronizer is never needed: the run touches
    # the bare store exactly like the plain baseline and stays byte-identical.
    if shared == 0:
        return _run_plain(config, base, watch)

    service: SynchronizerService | None = None
    agents: dict[str, ClientAgent] = {}

    def agent(name: str) -> ClientAgent:
        assert service is not None
        backend = ServiceBackend(LocalTransport(service))
        return ClientAgent(name, base / f"profile-{name}", backend, f"{name}-pw")

    try:
        watch.start("create")
        service = SynchronizerService(base / "service.journal")
        agents["owner"] = agent("owner")
        for name in receiver_names:
            agents[name] = agent(name)
        agents["owner"].create_table(TABLE, COLUMNS)
        watch.stop()

        watch.start("populate")
        owner = agents["owner"]
        for dossier, (pk, payload) in enumerate(rows, start=1):
            owner.add_dossier(dossier, TABLE, [pk, payload])
        watch.stop()

        watch.start("share")
        names = _receiver_names(config)
        for dossier in range(1, shared + 1):
            for j in range(config.receivers_per_dossier):
                owner.grant(dossier, names[(dossier - 1 + j) % len(names)])
            owner.send(dossier)
        watch.stop()

        watch.start("receive")
        for name in receiver_names:
            agents[name].receive()
        watch.stop()

        watch.start("open")
        read = 0
        for name in list(agents):
            agents[name].shutdown()
            # Reopening resolves every staged row: one key fetch, one
            # signature check, one unwrap, one decryption per shared row.
            agents[name] = agent(name)
            read += _scan_all(agents[name].store)
        watch.stop()
        return read
    finally:
        for live in agents.values():
            live.shutdown()
        if service is not None:
            service.close()


def _run_plain(config: BenchConfig, base: Path, watch: _Stopwatch) -> int:
    rows = _payloads(config)
    assigned = _assignments(config) if config.shared_count else {}
    receiver_names = [name for name, ids in assigned.items() if ids]

    def open_store(name: str) -> Store:
        return Store.open(base / f"{name}.script", base / f"{name}.journal")

    stores: dict[str, Store] = {}
    try:
        watch.start("create")
        stores["owner"] = open_store("owner")
        stores["owner"].create_table(TABLE, COLUMNS)
        for name in receiver_names:
            stores[name] = open_store(name)
            stores[name].create_table(TABLE, COLUMNS)
        watch.stop()

        watch.start("populate")
        for pk, payload in rows:
            stores["owner"].insert(TABLE, [pk, payload])
        watch.stop()

        watch.start("share")
        watch.stop()

        # The plain analogue of receiving: the same rows arrive as local inserts.
        watch.start("receive")
        for name in receiver_names:
            for dossier in assigned[name]:
                pk, payload = rows[dossier - 1]
                stores[name].insert(TABLE, [pk, payload])
        watch.stop()

        watch.start("open")
        read = 0
        for name in list(stores):
            stores[name].shutdown()
            stores[name] = open_store(name)
            read += _scan_all(stores[name])
        watch.stop()
        return read
    finally:
        for store in stores.values():
            store.shutdown()


def run(config: BenchConfig, base_dir: str | Path | None = None) -> BenchReport:
    """Measure one config; medians over ``config.repeats`` fresh runs."""
    _validate(config)
    if base_dir is None:
        with tempfile.TemporaryDirectory(prefix="rowshare-bench-") as tmp:
            return run(config, tmp)

    runner = _run_encrypted if config.mode == ENCRYPTED else _run_plain
    expected = (
        config.num_dossiers + config.shared_count * config.receivers_per_dossier
    )
    samples: list[dict[str, float]] = []
    counters: dict[str, CryptoCounters] = {}
    rows_read = 0
    for attempt in range(config.repeats):
        base = Path(base_dir) / f"{config.mode}-r{attempt}"
        try:
            base.mkdir(parents=True)
        except FileExistsError:
            raise ConfigError(
                f"benchmark directory {base} already exists; use a fresh base_dir"
            ) from None
        watch = _Stopwatch()
        rows_read = runner(config, base, watch)
        if rows_read != expected:
            raise ConfigError(
                f"workload read {rows_read} rows, expected {expected}"
            )
        samples.append(watch.seconds)
        if attempt == 0:
            counters = watch.counters
        logger.debug(
            "bench %s N=%d run %d: %.3fs",
            config.mode, config.num_dossiers, attempt,
            sum(watch.seconds.values()),
        )
    seconds = {
        name: statistics.median(sample[name] for sample in samples)
        for name in PHASES
    }
    return BenchReport(config, seconds, counters, rows_read)


def compare(
    config: BenchConfig, base_dir: str | Path | None = None
) -> tuple[BenchReport, BenchReport]:
    """Run encrypted and plain twins; the encrypted report gets overhead_pct."""
    encrypted = run(dataclasses.replace(config, mode=ENCRYPTED), base_dir)
    plain = run(dataclasses.replace(config, mode=PLAIN), base_dir)
    baseline = plain.comparable_seconds
    overhead = 100.0 * (encrypted.comparable_seconds - baseline) / baseline
    return dataclasses.replace(encrypted, overhead_pct=overhead), plain


# -- sweeps and fits ---------------------------------------------------------------

CSV_COLUMNS = (
    "num_dossiers",
    "pct_shared",
    "num_clients",
    "receivers_per_dossier",
    "dossier_size_bytes",
    "repeats",
    "seed",
    "create_s",
    "populate_s",
    "share_s",
    "receive_s",
    "open_s",
    "total_s",
    "comparable_s",
    "plain_total_s",
    "plain_comparable_s",
    "overhead_pct",
    "share_encrypts",
    "open_decrypts",
    "key_wraps",
    "key_unwraps",
    "signs",
    "verifies",
)


def csv_row(encrypted: BenchReport, plain: BenchReport) -> dict[str, object]:
    config = encrypted.config
    row: dict[str, object] = {
        "num_dossiers": config.num_dossiers,
        "pct_shared": config.pct_shared,
        "num_clients": config.num_clients,
        "receivers_per_dossier": config.receivers_per_dossier,
        "dossier_size_bytes": config.dossier_size_bytes,
        "repeats": config.repeats,
        "seed": config.seed,
        "total_s": round(encrypted.total_seconds, 6),
        "comparable_s": round(encrypted.comparable_seconds, 6),
        "plain_total_s": round(plain.total_seconds, 6),
        "plain_comparable_s": round(plain.comparable_seconds, 6),
        "overhead_pct": round(encrypted.overhead_pct or 0.0, 3),
        "share_encrypts": encrypted.counters["share"].row_encrypts,
        "open_decrypts": encrypted.counters["open"].row_decrypts,
        "key_wraps": encrypted.counter_total("key_wraps"),
        "key_unwraps": encrypted.counter_total("key_unwraps"),
        "signs": encrypted.counter_total("signs"),
        "verifies": encrypted.counter_total("verifies"),
    }
    for name in PHASES:
        row[f"{name}_s"] = round(encrypted.seconds[name], 6)
    return row


def sweep(
    configs: list[BenchConfig],
    csv_path: str | Path | None = None,
    base_dir: str | Path | None = None,
) -> list[tuple[BenchReport, BenchReport]]:
    """Compare every config; optionally write one CSV row per config."""
    results = []
    for index, config in enumerate(configs):
        sub = None if base_dir is None else Path(base_dir) / f"cfg{index}"
        results.append(compare(config, sub))
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for encrypted, plain in results:
                writer.writerow(csv_row(encrypted, plain))
    return results


def linear_fit(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares line through (xs, ys); returns (slope, intercept, r2)."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ConfigError("linear_fit needs two or more points")
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    if sxx == 0:
        raise ConfigError("linear_fit needs distinct x values")
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = sum((y - (intercept + slope * x)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2
