"""Fault injection and adversary simulation: outages, races, redirection."""

from __future__ import annotations

import json
import random

import pytest

from rowshare.client import ClientAgent, ServiceBackend, project
from rowshare.crypto import generate_keypair, hex_encode, unwrap_key, verify
from rowshare.errors import ConfigError, UnreachableError
from rowshare.faultsim import (
    SIM_PBKDF2_ITERATIONS,
    FakeSynchronizer,
    NetControl,
    ScenarioRunner,
    SimClock,
    SimTransport,
    list_scenarios,
    load_scenario,
    run_key_rotation_race,
    run_redirection_attack,
    run_scenario,
)
from rowshare.records import WrappedKeyRecord
from rowshare.synchronizer import SynchronizerService
from rowshare.wire import decode_response, encode_request

SEEDS = (0, 1, 2)

ALL_SCENARIOS = [
    "outage-mid-sync",
    "outage-post-sync",
    "outage-pre-sync",
    "redirection-attack",
    "rotation-race-resend",
    "rotation-race-retain-old",
    "rotation-race-unmitigated",
]


def get_phase(report, name: str):
    for phase in report.phases:
        if phase.name == name:
            return phase
    raise AssertionError(f"no phase {name!r} in {[p.name for p in report.phases]}")


def checks_by_name(phase) -> dict:
    return {check.name: check for check in phase.checks}


def dossier_values(plan: dict, client: str, dossier: int) -> list[str]:
    for step in plan["steps"]:
        body = step.get("do")
        if (
            body
            and body.get("op") == "add_dossier"
            and body["client"] == client
            and int(body["dossier"]) == dossier
        ):
            return [str(v) for v in body["values"]]
    raise AssertionError(f"plan has no add_dossier for {client}/{dossier}")


def fresh_service(clock: SimClock) -> SynchronizerService:
    return SynchronizerService(
        None, clock=clock, pbkdf2_iterations=SIM_PBKDF2_ITERATIONS
    )


class TestLinkControls:
    def test_drop_all_blocks_and_restores(self):
        control = NetControl()
        assert control.allow()
        control.drop_all = True
        assert not control.allow()
        control.drop_all = False
        assert control.allow()

    def test_drop_after_counts_deliveries(self):
        control = NetControl(drop_after=2)
        assert [control.allow() for _ in range(4)] == [True, True, False, False]
        control.drop_after = None
        assert control.allow()

    def test_downed_transport_raises_unreachable(self):
        clock = SimClock()
        control = NetControl(drop_all=True)
        transport = SimTransport(fresh_service(clock), control, clock)
        with pytest.raises(UnreachableError):
            transport.call("ping", {})
        control.drop_all = False
        assert transport.call("ping", {}) == "pong"

    def test_latency_advances_the_clock(self):
        clock = SimClock()
        transport = SimTransport(fresh_service(clock), NetControl(latency=0.5), clock)
        start = clock()
        transport.call("ping", {})
        transport.call("ping", {})
        assert clock() - start == pytest.approx(1.0)

    def test_redirect_reaches_the_other_endpoint(self):
        clock = SimClock()
        fake = FakeSynchronizer(clock)
        control = NetControl(redirect_to=fake)
        transport = SimTransport(fresh_service(clock), control, clock)
        assert transport.call("ping", {}) == "pong"
        assert len(fake.capture) == 2  # one request plus one response recorded
        control.redirect_to = None
        transport.call("ping", {})
        assert len(fake.capture) == 2  # back on the genuine endpoint


class TestScenarioCatalog:
    def test_catalog_lists_the_packaged_scenarios(self):
        assert list_scenarios() == sorted(ALL_SCENARIOS)

    def test_every_plan_is_well_formed(self):
        for name in list_scenarios():
            plan = load_scenario(name)
            assert plan["name"] == name
            assert plan["clients"]
            assert plan["steps"][0] == {"phase": "setup"}

    def test_unknown_scenario_is_rejected(self):
        with pytest.raises(ConfigError):
            load_scenario("no-such-scenario")

    def test_unknown_mitigation_is_rejected(self):
        with pytest.raises(ConfigError):
            run_key_rotation_race(0, "hope")

    def test_structural_plan_errors_raise(self, tmp_path):
        plan = {"name": "x", "clients": ["a"], "steps": [{"bogus": 1}]}
        with pytest.raises(ConfigError):
            ScenarioRunner(plan, 0, tmp_path / "s1").run()
        plan = {
            "name": "x",
            "clients": ["a"],
            "steps": [{"assert": {"kind": "levitates"}}],
        }
        with pytest.raises(ConfigError):
            ScenarioRunner(plan, 0, tmp_path / "s2").run()

    def test_failed_client_op_becomes_a_failed_check(self, tmp_path):
        plan = {
            "name": "x",
            "clients": ["a"],
            "steps": [{"do": {"op": "send", "client": "a", "dossier": 1}}],
        }
        report = ScenarioRunner(plan, 0, tmp_path / "s3").run()
        assert not report.passed
        assert report.failures()[0].name == "do:send"


class TestOutageScenarios:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_pre_sync_outage(self, tmp_path, seed):
        report = run_scenario("outage-pre-sync", seed, tmp_path / "sim")
        assert report.passed, report.failures()
        probe = get_phase(report, "outage").probes[0]
        assert probe["owned_data_access"] is True
        assert probe["shared_data_access"] is False
        assert probe["update_flow"] is False
        recovered = get_phase(report, "recovery").probes[0]
        assert recovered["shared_data_access"] is True

    @pytest.mark.parametrize("seed", SEEDS)
    def test_post_sync_outage(self, tmp_path, seed):
        report = run_scenario("outage-post-sync", seed, tmp_path / "sim")
        assert report.passed, report.failures()
        outage = get_phase(report, "outage")
        # Cached key: shared data stays readable through the outage.
        assert outage.probes[0]["shared_data_access"] is True
        assert outage.probes[0]["update_flow"] is False
        assert checks_by_name(outage)["outbox_count:alice"].ok

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mid_sync_outage(self, tmp_path, seed):
        report = run_scenario("outage-mid-sync", seed, tmp_path / "sim")
        assert report.passed, report.failures()
        cut = checks_by_name(get_phase(report, "cut"))
        assert cut["receive_unreachable:bob"].ok
        assert cut["phase_is:bob:2"].ok  # persisted before the ack was lost
        recovery = checks_by_name(get_phase(report, "recovery"))
        assert recovery["receive_count:bob"].ok  # redelivered exactly once
        assert recovery["single_copy:bob:2"].ok  # and visible exactly once


class TestRotationRace:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_unmitigated_race_loses_access(self, tmp_path, seed):
        report = run_key_rotation_race(seed, "none", tmp_path / "sim")
        assert report.passed, report.failures()
        race = checks_by_name(get_phase(report, "race"))
        assert race["use_fails:bob:1"].ok
        assert race["phase_is:bob:1"].ok  # ciphertext kept; only the key is gone

    @pytest.mark.parametrize("seed", SEEDS)
    def test_retaining_the_old_key_recovers(self, tmp_path, seed):
        report = run_key_rotation_race(seed, "retain_old", tmp_path / "sim")
        assert report.passed, report.failures()
        assert checks_by_name(get_phase(report, "race"))["use_ok:bob:1"].ok

    @pytest.mark.parametrize("seed", SEEDS)
    def test_resend_recovers(self, tmp_path, seed):
        report = run_key_rotation_race(seed, "resend", tmp_path / "sim")
        assert report.passed, report.failures()
        mitigation = checks_by_name(get_phase(report, "mitigation"))
        assert mitigation["poll_resends:alice"].ok
        assert mitigation["use_ok:bob:1"].ok
        assert mitigation["single_copy:bob:1"].ok


class TestRedirection:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_attack_report_passes(self, tmp_path, seed):
        report = run_redirection_attack(seed, tmp_path / "sim")
        assert report.passed, report.failures()
        attack = checks_by_name(get_phase(report, "attack"))
        assert attack["use_fails:bob:9"].ok  # forged records rejected
        assert attack["use_fails:bob:1"].ok  # withheld key is a visible denial
        aftermath = checks_by_name(get_phase(report, "aftermath"))
        assert aftermath["capture_clean"].ok
        assert aftermath["use_ok:bob:1"].ok  # access returns with the genuine service

    def test_capture_holds_traffic_but_no_secrets(self, tmp_path):
        runner = ScenarioRunner(load_scenario("redirection-attack"), 1, tmp_path / "sim")
        report = runner.run()
        assert report.passed, report.failures()
        assert runner.fake.capture
        text = runner.fake.capture_text()
        forged_value = runner.plan["adversary"]["values"][1]
        shared_value = dossier_values(runner.plan, "alice", 1)[1]
        assert forged_value not in text  # even forgeries travel encrypted
        assert shared_value not in text
        alice, bob = runner.clients["alice"], runner.clients["bob"]
        for key, _version in alice._dossier_keys.values():
            assert hex_encode(key) not in text
        assert hex_encode(alice.keypair.private) not in text
        assert hex_encode(bob.keypair.private) not in text

    def test_forged_row_never_becomes_visible(self, tmp_path):
        runner = ScenarioRunner(load_scenario("redirection-attack"), 2, tmp_path / "sim")
        report = runner.run()
        assert report.passed, report.failures()
        bob = runner.clients["bob"]
        visible = [
            row for table in bob.store.tables.values() for row in table.rows.values()
        ]
        assert all(row.shared_id != 9 for row in visible)
        forged_value = runner.plan["adversary"]["values"][1]
        assert all(
            forged_value not in value for row in visible for _col, value in row.fields
        )
        # The bait ciphertext stays parked, undecryptable, never loaded.
        assert 9 in bob.store.pending_ids()

    def test_forged_record_verifies_only_under_the_forged_key(self):
        """The signature pin is the sole gate: the forgery is otherwise perfect."""
        clock = SimClock()
        fake = FakeSynchronizer(clock, {
            "impersonate": "alice",
            "dossier": 9,
            "table": "items",
            "columns": ["id", "name"],
            "values": ["it-1", "x"],
            "key_version": 1,
        })
        genuine_alice = generate_keypair()  # what a victim would have pinned
        victim = generate_keypair()
        fake.handle_line(encode_request("register_user", None, {
            "user_id": "bob",
            "public_key": hex_encode(victim.public),
            "password": "pw",
        }))
        session = decode_response(fake.handle_line(
            encode_request("login", None, {"user_id": "bob", "password": "pw"})
        ))
        data = decode_response(fake.handle_line(
            encode_request("get_key", session, {"dossier_id": 9, "key_version": 1})
        ))
        record = WrappedKeyRecord.from_wire(data)
        assert record.sender_id == "alice"
        fake_pk = fake._identity("alice").public
        assert verify(record.signing_bytes(), record.sender_signature, fake_pk)
        assert not verify(
            record.signing_bytes(), record.sender_signature, genuine_alice.public
        )
        # The wrap itself opens fine for the victim; only the signature saves it.
        assert unwrap_key(record.wrapped_key, victim.private)


class TestDeterminism:
    @pytest.mark.parametrize("name", ALL_SCENARIOS)
    def test_reports_identical_across_repeats(self, tmp_path, name):
        first = run_scenario(name, 1, tmp_path / "run1").to_dict()
        second = run_scenario(name, 1, tmp_path / "run2").to_dict()
        assert first == second

    def test_report_round_trips_through_json(self, tmp_path):
        report = run_scenario("outage-mid-sync", 3, tmp_path / "sim")
        assert json.loads(json.dumps(report.to_dict())) == report.to_dict()


class TestLiveness:
    @pytest.mark.parametrize("cut", [0, 1, 2, 3])
    def test_delivery_survives_any_cut_point(self, tmp_path, cut):
        """Wherever the link dies, clearing it always converges to one copy."""
        base = tmp_path / f"cut{cut}"
        base.mkdir()
        clock = SimClock()
        service = SynchronizerService(
            base / "service.journal", clock=clock,
            pbkdf2_iterations=SIM_PBKDF2_ITERATIONS,
        )
        controls = {name: NetControl() for name in ("alice", "bob")}
        clients = {
            name: ClientAgent(
                name,
                base / f"profile-{name}",
                ServiceBackend(SimTransport(service, controls[name], clock)),
                password=f"{name}-pw",
            )
            for name in ("alice", "bob")
        }
        alice, bob = clients["alice"], clients["bob"]
        alice.create_table("items", ["id", "name"])
        alice.add_dossier(1, "items", ["it-1", f"payload-{cut}"])
        alice.grant(1, "bob")
        alice.send(1)

        controls["bob"].drop_after = cut
        try:
            bob.receive()
        except UnreachableError:
            pass
        controls["bob"].drop_after = None
        bob.receive()

        grant = alice.grants[(1, "bob")]
        assert bob.use(1).fields == project(alice.use(1), grant).fields
        copies = [
            row
            for table in bob.store.tables.values()
            for row in table.rows.values()
            if row.shared_id == 1
        ]
        assert len(copies) == 1
        service.close()


class TestSafety:
    def test_owner_values_never_leave_owner_files(self, tmp_path):
        """Across every scenario, alice's row values exist on disk only at alice's."""
        token = f"{random.Random(0).getrandbits(64):016x}"
        for name in ALL_SCENARIOS:
            base = tmp_path / name
            runner = ScenarioRunner(load_scenario(name), 0, base)
            report = runner.run()
            assert report.passed, (name, report.failures())
            marked = [
                value
                for step in runner.plan["steps"]
                if step.get("do", {}).get("op") == "add_dossier"
                and step["do"]["client"] == "alice"
                for value in step["do"]["values"]
                if token in value
            ]
            assert marked, name
            for path in sorted(base.rglob("*")):
                if not path.is_file():
                    continue
                if "profile-alice" in path.relative_to(base).parts:
                    continue
                content = path.read_text(encoding="utf-8", errors="replace")
                for value in marked:
                    assert value not in content, (name, str(path), value)
