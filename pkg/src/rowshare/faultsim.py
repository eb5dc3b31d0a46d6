"""Deterministic fault and adversary simulation for the sharing protocol.

Clients talk to an in-process synchronizer through simulated links whose
behavior is script-controlled: total outages, cuts after a counted number of
messages, added latency, and redirection to a hostile endpoint.  The links
run the same wire codec as the TCP transport, so every simulated exchange
serializes and parses the exact bytes a socket would carry.

Scenarios are declarative JSON files shipped with the package: named phases
containing client operations, link-control changes, capability probes, and
checks.  A check performs the operation it judges and records the outcome;
failures are reported, never raised, so one run always yields a complete
report.  Time is a logical clock owned by the run, and all randomness flows
from the seed, which makes reports reproducible: identical (scenario, seed)
pairs produce identical report dicts.
"""

from __future__ import annotations

import json
import logging
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .client import ClientAgent, ServiceBackend, project
from .crypto import (
    encrypt_row,
    generate_keypair,
    generate_row_key,
    hex_decode,
    hex_encode,
    sign,
    wrap_key,
)
from .errors import (
    ConfigError,
    KeyNotFoundError,
    RowShareError,
    SessionExpiredError,
    UnreachableError,
)
from .records import PendingRow, WrappedKeyRecord
from .rowstore import Row, serialize_row
from .synchronizer import SynchronizerService
from .wire import (
    RequestHandler,
    decode_request,
    decode_response,
    encode_error,
    encode_ok,
    encode_request,
)

logger = logging.getLogger(__name__)

# Authentication strength is irrelevant inside a simulation; keep logins cheap.
SIM_PBKDF2_ITERATIONS = 10


class SimClock:
    """Logical time: starts at a fixed epoch, moves only when told to."""

    def __init__(self, start: float = 1_000_000.0) -> None:
        self.now = float(start)

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@dataclass
class NetControl:
    """Injectable behavior of one client's link to the synchronizer."""

    drop_all: bool = False
    drop_after: int | None = None
    latency: float = 0.0
    redirect_to: RequestHandler | None = None

    def allow(self) -> bool:
        """Consume one delivery slot; False once the link is down."""
        if self.drop_all:
            return False
        if self.drop_after is not None:
            if self.drop_after <= 0:
                return False
            self.drop_after -= 1
        return True


class SimTransport:
    """Transport whose delivery is governed by a NetControl."""

    def __init__(
        self, handler: RequestHandler, control: NetControl, clock: SimClock
    ) -> None:
        self.handler = handler
        self.control = control
        self.clock = clock

    def call(self, op: str, payload: dict, session: str | None = None) -> Any:
        self.clock.advance(self.control.latency)
        if not self.control.allow():
            raise UnreachableError("link down (simulated)")
        target = self.control.redirect_to or self.handler
        response = target.handle_line(encode_request(op, session, payload))
        return decode_response(response)

    def close(self) -> None:
        pass


class FakeSynchronizer:
    """Hostile endpoint: records all traffic and optionally forges records.

    It speaks the real protocol, backed by its own empty service so victims
    can register and hold sessions, while keeping every request and response
    byte it sees.  In forging mode it invents a wrapped key and a pending
    row under a trusted sender's name, wrapped for whichever victim last
    logged in: the strongest position a redirection adversary reaches
    without holding the impersonated sender's signing key.
    """

    def __init__(self, clock: SimClock, forging: dict | None = None) -> None:
        self.inner = SynchronizerService(
            None, clock=clock, pbkdf2_iterations=SIM_PBKDF2_ITERATIONS
        )
        self.clock = clock
        self.forging = dict(forging or {})
        self.capture: list[tuple[str, bytes]] = []
        self.known_pks: dict[str, str] = {}
        self.last_user: str | None = None
        self._identities: dict[str, Any] = {}
        self._row_keys: dict[int, bytes] = {}
        self._row_delivered = False

    def capture_text(self) -> str:
        return "\n".join(
            line.decode("utf-8", errors="replace") for _, line in self.capture
        )

    def handle_line(self, line: bytes) -> bytes:
        self.capture.append(("request", bytes(line)))
        response = self._respond(line)
        self.capture.append(("response", bytes(response)))
        return response

    def _respond(self, line: bytes) -> bytes:
        try:
            op, _session, payload = decode_request(line)
        except RowShareError as exc:
            return encode_error(exc)
        if op == "register_user":
            self.known_pks[str(payload.get("user_id"))] = str(
                payload.get("public_key")
            )
        elif op == "login":
            self.last_user = str(payload.get("user_id"))
        if self.forging and op in {"get_public_key", "get_key", "get_pending_rows"}:
            try:
                return encode_ok(self._forge(op, payload))
            except RowShareError as exc:
                return encode_error(exc)
        return self.inner.handle_line(line)

    # -- forgery ---------------------------------------------------------------

    def _identity(self, name: str):
        pair = self._identities.get(name)
        if pair is None:
            pair = generate_keypair()
            self._identities[name] = pair
        return pair

    def _row_key(self, dossier_id: int) -> bytes:
        key = self._row_keys.get(dossier_id)
        if key is None:
            key = generate_row_key()
            self._row_keys[dossier_id] = key
        return key

    def _forge(self, op: str, payload: dict) -> Any:
        victim = self.last_user
        victim_pk = None if victim is None else self.known_pks.get(victim)
        if victim_pk is None:
            # Funnel the caller through a fresh login so its registration,
            # and with it its public key, lands here first.
            raise SessionExpiredError("session not recognized")
        if op == "get_public_key":
            user = str(payload.get("user_id"))
            known = self.known_pks.get(user)
            # Substitute our own key for anyone who never registered here.
            return known if known is not None else hex_encode(self._identity(user).public)
        sender = str(self.forging["impersonate"])
        dossier = int(self.forging["dossier"])
        version = int(self.forging.get("key_version", 1))
        if op == "get_key":
            asked = int(payload["dossier_id"])
            if asked != dossier:
                raise KeyNotFoundError(f"no key for dossier {asked}")
            requested = payload.get("key_version")
            record = WrappedKeyRecord(
                dossier_id=dossier,
                key_version=version if requested is None else int(requested),
                sender_id=sender,
                receiver_id=victim,
                expiry=None,
                wrapped_key=wrap_key(self._row_key(dossier), hex_decode(victim_pk)),
            )
            record = record.signed(
                sign(record.signing_bytes(), self._identity(sender).private)
            )
            return record.to_wire()
        if op == "get_pending_rows":
            if self._row_delivered:
                return []
            self._row_delivered = True
            columns = [str(c) for c in self.forging["columns"]]
            values = [str(v) for v in self.forging["values"]]
            row = Row(
                table=str(self.forging["table"]),
                pk=values[0],
                fields=tuple(zip(columns, values)),
            )
            pending = PendingRow(
                sender_id=sender,
                receiver_id=victim,
                dossier_id=dossier,
                key_version=version,
                encrypted_row=encrypt_row(
                    serialize_row(row), self._row_key(dossier)
                ).to_bytes(),
                id_pending_row=1,
                submitted_at=self.clock(),
            )
            pending = pending.signed(
                sign(pending.signing_bytes(), self._identity(sender).private)
            )
            return [pending.to_wire()]
        raise AssertionError(f"op {op!r} has no forgery")


# -- reports ------------------------------------------------------------------------


@dataclass
class Check:
    """One judged claim inside a phase."""

    name: str
    ok: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "ok": self.ok, "detail": self.detail}


@dataclass
class PhaseReport:
    name: str
    probes: list[dict] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.ok for check in self.checks)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "probes": self.probes,
            "checks": [check.to_dict() for check in self.checks],
        }


@dataclass
class ScenarioReport:
    scenario: str
    seed: int
    phases: list[PhaseReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(phase.passed for phase in self.phases)

    @property
    def checks(self) -> list[Check]:
        return [check for phase in self.phases for check in phase.checks]

    def failures(self) -> list[Check]:
        return [check for check in self.checks if not check.ok]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "passed": self.passed,
            "phases": [phase.to_dict() for phase in self.phases],
        }


# -- scenario execution ----------------------------------------------------------------


def _substitute(node: Any, mapping: dict[str, str]) -> Any:
    if isinstance(node, str):
        for token, value in mapping.items():
            node = node.replace(token, value)
        return node
    if isinstance(node, list):
        return [_substitute(item, mapping) for item in node]
    if isinstance(node, dict):
        return {key: _substitute(value, mapping) for key, value in node.items()}
    return node


class ScenarioRunner:
    """Executes one scenario plan against a fresh service and fresh clients.

    ``{rand}`` in any plan string becomes a seed-derived token, so runs under
    different seeds move different data while staying individually
    deterministic.  Report details never include key material, clock values,
    or absolute paths; that is what keeps reports comparable across runs.
    """

    def __init__(
        self, plan: dict, seed: int, base_dir: str | Path
    ) -> None:
        self.seed = seed
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        rng = random.Random(seed)
        token = f"{rng.getrandbits(64):016x}"
        self.plan = _substitute(plan, {"{rand}": token, "{seed}": str(seed)})

        self.clock = SimClock()
        self.service = SynchronizerService(
            self.base_dir / "service.journal",
            clock=self.clock,
            pbkdf2_iterations=SIM_PBKDF2_ITERATIONS,
        )
        adversary = self.plan.get("adversary")
        self.fake = (
            None if adversary is None else FakeSynchronizer(self.clock, adversary)
        )
        self.controls: dict[str, NetControl] = {}
        self.clients: dict[str, ClientAgent] = {}
        for name in self.plan.get("clients", []):
            self.controls[name] = NetControl()
            self.clients[name] = self._make_client(name)
        self.report = ScenarioReport(str(self.plan.get("name", "unnamed")), seed)

    def _make_client(self, name: str) -> ClientAgent:
        transport = SimTransport(self.service, self.controls[name], self.clock)
        return ClientAgent(
            name,
            self.base_dir / f"profile-{name}",
            ServiceBackend(transport),
            password=f"{name}-pw",
        )

    def run(self) -> ScenarioReport:
        try:
            for step in self.plan.get("steps", []):
                self._step(dict(step))
        finally:
            self.close()
        return self.report

    def close(self) -> None:
        for agent in self.clients.values():
            try:
                agent.shutdown()
            except RowShareError:
                logger.exception("client shutdown failed")
        self.service.close()

    # -- step dispatch ---------------------------------------------------------

    def _current(self) -> PhaseReport:
        if not self.report.phases:
            self.report.phases.append(PhaseReport("setup"))
        return self.report.phases[-1]

    def _step(self, step: dict) -> None:
        if "phase" in step:
            self.report.phases.append(PhaseReport(str(step["phase"])))
        elif "set" in step:
            self._apply_control(dict(step["set"]))
        elif "do" in step:
            self._do(dict(step["do"]))
        elif "probe" in step:
            self._probe(dict(step["probe"]))
        elif "assert" in step:
            self._assert(dict(step["assert"]))
        else:
            raise ConfigError(f"unrecognized scenario step: {sorted(step)}")

    def _apply_control(self, body: dict) -> None:
        control = self.controls[str(body["link"])]
        if "drop_all" in body:
            control.drop_all = bool(body["drop_all"])
        if "drop_after" in body:
            value = body["drop_after"]
            control.drop_after = None if value is None else int(value)
        if "latency" in body:
            control.latency = float(body["latency"])
        if "redirect" in body:
            target = body["redirect"]
            if target is None:
                control.redirect_to = None
            elif target == "fake" and self.fake is not None:
                control.redirect_to = self.fake
            else:
                raise ConfigError(f"unknown redirect target: {target!r}")

    def _do(self, body: dict) -> None:
        op = str(body.pop("op"))
        try:
            self._run_op(op, body)
        except RowShareError as exc:
            self._current().checks.append(
                Check(f"do:{op}", False, f"{exc.category}: {exc}")
            )

    def _run_op(self, op: str, body: dict) -> None:
        if op == "advance_clock":
            self.clock.advance(float(body["seconds"]))
            return
        name = str(body["client"])
        client = self.clients[name]
        if op == "create_table":
            client.create_table(str(body["table"]), [str(c) for c in body["columns"]])
        elif op == "add_dossier":
            client.add_dossier(
                int(body["dossier"]), str(body["table"]),
                [str(v) for v in body["values"]],
            )
        elif op == "update_dossier":
            client.update_dossier(int(body["dossier"]), [str(v) for v in body["values"]])
        elif op == "grant":
            columns = body.get("columns")
            client.grant(
                int(body["dossier"]),
                str(body["receiver"]),
                None if columns is None else {str(c) for c in columns},
                body.get("expiry"),
            )
        elif op == "send":
            client.send(int(body["dossier"]))
        elif op == "receive":
            client.receive()
        elif op == "use":
            client.use(int(body["dossier"]))
        elif op == "revoke":
            client.revoke(int(body["dossier"]), str(body["receiver"]))
        elif op == "flush":
            client.flush_outbox()
        elif op == "rotate_keypair":
            client.rotate_keypair(retain_old=bool(body.get("retain_old", True)))
        elif op == "request_resend":
            client.request_resend(int(body["dossier"]))
        elif op == "poll_resends":
            client.poll_resends()
        elif op == "restart":
            self._restart(name, clean=True)
        elif op == "crash_restart":
            self._restart(name, clean=False)
        else:
            raise ConfigError(f"unknown scenario op: {op!r}")

    def _restart(self, name: str, clean: bool) -> None:
        if clean:
            self.clients[name].shutdown()
        # A crash restart abandons the old agent: journal intact, volatile
        # state (cached keys, outbox, sessions) gone, like a killed process.
        self.clients[name] = self._make_client(name)

    # -- probes ------------------------------------------------------------------

    def _probe(self, body: dict) -> None:
        name = str(body["client"])
        client = self.clients[name]
        result: dict[str, Any] = {"client": name}
        if body.get("owned") is not None:
            result["owned_data_access"] = self._quiet_use(client, int(body["owned"]))
        if body.get("shared") is not None:
            result["shared_data_access"] = self._quiet_use(client, int(body["shared"]))
        result["update_flow"] = self._ping(client)
        self._current().probes.append(result)
        expect = body.get("expect")
        if expect is not None:
            actual = {key: result.get(key) for key in expect}
            self._current().checks.append(Check(
                f"probe:{name}",
                actual == expect,
                "" if actual == expect else f"expected {expect}, observed {actual}",
            ))

    def _quiet_use(self, client: ClientAgent, dossier_id: int) -> bool:
        try:
            client.use(dossier_id)
            return True
        except RowShareError:
            return False

    def _ping(self, client: ClientAgent) -> bool:
        try:
            client.backend.transport.call("ping", {})
            return True
        except RowShareError:
            return False

    # -- checks --------------------------------------------------------------------

    def _assert(self, body: dict) -> None:
        kind = str(body.pop("kind"))
        handler = getattr(self, f"_check_{kind}", None)
        if handler is None:
            raise ConfigError(f"unknown assertion kind: {kind!r}")
        name, ok, detail = handler(body)
        self._current().checks.append(Check(name, bool(ok), detail))

    def _check_use_ok(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        name = f"use_ok:{client.user_id}:{dossier}"
        try:
            row = client.use(dossier)
        except RowShareError as exc:
            return name, False, f"use failed with {exc.category}: {exc}"
        values = body.get("values")
        if values is not None:
            got = [value for _, value in row.fields]
            want = [str(v) for v in values]
            if got != want:
                return name, False, f"row values {got} != expected {want}"
        return name, True, ""

    def _check_use_fails(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        category = str(body["category"])
        name = f"use_fails:{client.user_id}:{dossier}"
        try:
            client.use(dossier)
        except RowShareError as exc:
            if exc.category == category:
                return name, True, ""
            return name, False, f"failed with {exc.category!r}, expected {category!r}"
        return name, False, "use unexpectedly succeeded"

    def _check_receive_count(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        want = int(body["count"])
        name = f"receive_count:{client.user_id}"
        try:
            got = client.receive()
        except RowShareError as exc:
            return name, False, f"receive failed with {exc.category}: {exc}"
        return name, got == want, "" if got == want else f"received {got}, expected {want}"

    def _check_receive_unreachable(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        name = f"receive_unreachable:{client.user_id}"
        try:
            got = client.receive()
        except UnreachableError:
            return name, True, ""
        except RowShareError as exc:
            return name, False, f"failed with {exc.category!r}, expected 'unreachable'"
        return name, False, f"receive returned {got} rows over a link meant to be down"

    def _check_send_queued(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        name = f"send_queued:{client.user_id}:{dossier}"
        try:
            delivered = client.send(dossier)
        except RowShareError as exc:
            return name, False, f"send failed with {exc.category}: {exc}"
        return name, not delivered, "" if not delivered else "send claims delivery"

    def _check_send_ok(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        name = f"send_ok:{client.user_id}:{dossier}"
        try:
            delivered = client.send(dossier)
        except RowShareError as exc:
            return name, False, f"send failed with {exc.category}: {exc}"
        return name, delivered, "" if delivered else "send queued instead of delivering"

    def _check_flush_ok(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        name = f"flush_ok:{client.user_id}"
        drained = client.flush_outbox()
        return name, drained, "" if drained else "outbox did not drain"

    def _check_outbox_count(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        want = int(body["count"])
        got = len(client.outbox)
        name = f"outbox_count:{client.user_id}"
        return name, got == want, "" if got == want else f"outbox holds {got}, expected {want}"

    def _check_poll_resends(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        want = int(body["count"])
        name = f"poll_resends:{client.user_id}"
        try:
            got = client.poll_resends()
        except RowShareError as exc:
            return name, False, f"poll failed with {exc.category}: {exc}"
        return name, got == want, "" if got == want else f"honored {got}, expected {want}"

    def _check_phase_is(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        want = str(body["phase"])
        got = client.receiver_phase(dossier)
        name = f"phase_is:{client.user_id}:{dossier}"
        return name, got == want, "" if got == want else f"phase is {got!r}, expected {want!r}"

    def _check_rows_equal(self, body: dict) -> tuple[str, bool, str]:
        owner = self.clients[str(body["owner"])]
        receiver = self.clients[str(body["receiver"])]
        dossier = int(body["dossier"])
        name = f"rows_equal:{dossier}"
        grant = owner.grants.get((dossier, receiver.user_id))
        if grant is None:
            return name, False, "owner holds no grant for that receiver"
        try:
            theirs = receiver.use(dossier)
        except RowShareError as exc:
            return name, False, f"receiver use failed with {exc.category}: {exc}"
        mine = project(owner.use(dossier), grant)
        same = (mine.table, mine.pk, mine.fields) == (
            theirs.table, theirs.pk, theirs.fields
        )
        return name, same, "" if same else "projected owner row differs from received row"

    def _check_single_copy(self, body: dict) -> tuple[str, bool, str]:
        client = self.clients[str(body["client"])]
        dossier = int(body["dossier"])
        count = sum(
            1
            for table in client.store.tables.values()
            for row in table.rows.values()
            if row.shared_id == dossier
        )
        name = f"single_copy:{client.user_id}:{dossier}"
        return name, count == 1, "" if count == 1 else f"found {count} visible copies"

    def _check_capture_nonempty(self, body: dict) -> tuple[str, bool, str]:
        count = 0 if self.fake is None else len(self.fake.capture)
        return "capture_nonempty", count > 0, "" if count else "no traffic was captured"

    def _check_capture_clean(self, body: dict) -> tuple[str, bool, str]:
        """The adversary's capture holds no plaintext sentinel and no live key."""
        if self.fake is None:
            return "capture_clean", False, "scenario has no adversary endpoint"
        forbidden: list[tuple[str, str]] = [
            (f"literal:{lit}", str(lit)) for lit in body.get("literals", [])
        ]
        for name, agent in sorted(self.clients.items()):
            for dossier, (key, _version) in sorted(agent._dossier_keys.items()):
                forbidden.append((f"{name}:dossier_key:{dossier}", hex_encode(key)))
            for dossier, (key, _version) in sorted(agent.key_cache.items()):
                forbidden.append((f"{name}:cached_key:{dossier}", hex_encode(key)))
            forbidden.append((f"{name}:private_key", hex_encode(agent.keypair.private)))
        text = self.fake.capture_text()
        hits = sorted({label for label, needle in forbidden if needle and needle in text})
        return "capture_clean", not hits, "" if not hits else f"capture contains {hits}"

    def _check_files_clean(self, body: dict) -> tuple[str, bool, str]:
        """No persisted file outside ``exclude``'s owners contains the literal."""
        literal = str(body["literal"])
        exclude = {str(name) for name in body.get("exclude", [])}
        hits: list[str] = []
        for name, agent in sorted(self.clients.items()):
            if name in exclude:
                continue
            for path in sorted(agent.profile_dir.rglob("*")):
                if not path.is_file():
                    continue
                if literal in path.read_text(encoding="utf-8", errors="replace"):
                    hits.append(str(path.relative_to(self.base_dir)))
        journal = self.base_dir / "service.journal"
        if journal.exists() and literal in journal.read_text(
            encoding="utf-8", errors="replace"
        ):
            hits.append(journal.name)
        name = f"files_clean:{literal}"
        return name, not hits, "" if not hits else f"found in {hits}"


# -- entry points ----------------------------------------------------------------------


def scenario_dir() -> Path:
    return Path(__file__).resolve().parent / "scenarios"


def list_scenarios() -> list[str]:
    return sorted(path.stem for path in scenario_dir().glob("*.json"))


def load_scenario(name: str) -> dict:
    path = scenario_dir() / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no such scenario: {name!r} (have {list_scenarios()})")
    return json.loads(path.read_text(encoding="utf-8"))


def run_scenario(
    name: str, seed: int = 0, base_dir: str | Path | None = None
) -> ScenarioReport:
    """Run one packaged scenario; uses a throwaway directory unless given one."""
    plan = load_scenario(name)
    if base_dir is None:
        with tempfile.TemporaryDirectory(prefix="rowshare-sim-") as tmp:
            return ScenarioRunner(plan, seed, tmp).run()
    return ScenarioRunner(plan, seed, base_dir).run()


def run_key_rotation_race(
    seed: int = 0, mitigation: str = "none", base_dir: str | Path | None = None
) -> ScenarioReport:
    """The stale-wrap race: a receiver rotates between grant and send."""
    names = {
        "none": "rotation-race-unmitigated",
        "retain_old": "rotation-race-retain-old",
        "resend": "rotation-race-resend",
    }
    if mitigation not in names:
        raise ConfigError(f"mitigation must be one of {sorted(names)}")
    return run_scenario(names[mitigation], seed, base_dir)


def run_redirection_attack(
    seed: int = 0, base_dir: str | Path | None = None
) -> ScenarioReport:
    """Clients redirected to a hostile endpoint that captures and forges."""
    return run_scenario("redirection-attack", seed, base_dir)
