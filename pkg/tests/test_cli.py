"""Command line: exit codes, output envelopes, end-to-end operator flows."""

from __future__ import annotations

import csv
import json

import pytest

from rowshare.cli import EXIT_SCENARIO_FAILED, main
from rowshare.synchronizer import SynchronizerService
from rowshare.wire import serve_in_background


@pytest.fixture()
def server(tmp_path):
    service = SynchronizerService(tmp_path / "cli-service.journal")
    srv = serve_in_background(service, "127.0.0.1", 0)
    host, port = srv.server_address[:2]
    try:
        yield f"{host}:{port}"
    finally:
        srv.shutdown()
        srv.server_close()
        service.close()


@pytest.fixture()
def cli(tmp_path, server, capsys):
    """Runner bound to one service; returns (exit_code, parsed_json)."""

    def invoke(user: str, *argv: str, json_mode: bool = True):
        flags = [
            "--profile", str(tmp_path / f"profile-{user}"),
            "--user", user,
            "--password", f"{user}-pw",
            "--connect", server,
        ]
        head = ["--json"] if json_mode else []
        code = main(head + list(argv[:1]) + flags + list(argv[1:]))
        out, err = capsys.readouterr()
        if json_mode:
            return code, json.loads(out.strip().splitlines()[-1])
        return code, out + err

    return invoke


def established(cli):
    """Owner shares dossier 1 with bob; returns nothing, asserts delivery."""
    code, _ = cli("bob", "register")
    assert code == 0
    code, _ = cli("alice", "create-table", "items", "id", "name", "qty")
    assert code == 0
    code, _ = cli("alice", "add", "1", "items", "it-100", "widget", "7")
    assert code == 0
    code, body = cli("alice", "grant", "1", "bob")
    assert code == 0 and body["result"]["delivered"] is True
    code, body = cli("alice", "send", "1")
    assert code == 0 and body["result"]["delivered"] is True
    code, body = cli("bob", "receive")
    assert code == 0 and body["result"]["received"] == 1


class TestEnvelope:
    def test_ok_envelope_shape(self, cli):
        code, body = cli("alice", "register")
        assert code == 0
        assert body["schema"] == 1
        assert body["ok"] is True
        assert len(body["result"]["public_key"]) == 128

    def test_error_envelope_shape(self, cli):
        code, body = cli("bob", "use", "42")
        assert code == 5
        assert body["ok"] is False
        assert body["error"]["category"] == "key_not_found"

    def test_human_output_lists_keys(self, cli):
        code, text = cli("alice", "register", json_mode=False)
        assert code == 0
        assert "public_key:" in text


class TestExitCodes:
    def test_missing_profile_is_usage_error(self, capsys):
        code = main(["--json", "register", "--user", "x", "--password", "y",
                     "--connect", "127.0.0.1:1"])
        out, _ = capsys.readouterr()
        assert code == 2
        assert json.loads(out)["error"]["category"] == "bad_config"

    def test_both_backends_rejected(self, tmp_path, capsys):
        code = main([
            "register", "--profile", str(tmp_path / "p"), "--user", "x",
            "--password", "y", "--connect", "h:1", "--mailbox", str(tmp_path),
        ])
        capsys.readouterr()
        assert code == 2

    def test_unreachable_service_exit_3(self, tmp_path, capsys):
        code = main([
            "register", "--profile", str(tmp_path / "p"), "--user", "x",
            "--password", "y", "--connect", "127.0.0.1:9",
        ])
        _, err = capsys.readouterr()
        assert code == 3
        assert "unreachable" in err

    def test_send_queued_while_unreachable_exit_3(self, tmp_path, server, cli, capsys):
        established(cli)
        code = main([
            "send", "1", "--profile", str(tmp_path / "profile-alice"),
            "--user", "alice", "--password", "alice-pw",
            "--connect", "127.0.0.1:9",
        ])
        _, err = capsys.readouterr()
        assert code == 3
        assert "rerun" in err

    def test_use_after_revoke_maps_to_key_not_found_exit(self, cli):
        established(cli)
        code, body = cli("bob", "use", "1")
        assert code == 0
        code, _ = cli("alice", "revoke", "1", "bob")
        assert code == 0
        code, body = cli("bob", "use", "1")
        assert code == 5
        assert body["error"]["category"] == "key_not_found"

    def test_duplicate_table_exit_9(self, cli):
        cli("alice", "create-table", "items", "id")
        code, body = cli("alice", "create-table", "items", "id")
        assert code == 9
        assert body["error"]["category"] == "duplicate_table"

    def test_update_of_foreign_dossier_not_owner(self, cli):
        established(cli)
        code, body = cli("bob", "update", "1", "it-100", "widget", "9")
        assert code == 6
        assert body["error"]["category"] == "not_owner"


class TestClientFlow:
    def test_round_trip_matches_owner_values(self, cli):
        established(cli)
        code, body = cli("bob", "use", "1")
        assert code == 0
        assert body["result"]["values"] == {
            "id": "it-100", "name": "widget", "qty": "7"
        }

    def test_update_then_send_propagates(self, cli):
        established(cli)
        code, _ = cli("alice", "update", "1", "it-100", "widget", "9")
        assert code == 0
        code, _ = cli("alice", "send", "1")
        assert code == 0
        code, body = cli("bob", "receive")
        assert body["result"]["received"] == 1
        code, body = cli("bob", "use", "1")
        assert body["result"]["values"]["qty"] == "9"

    def test_resend_request_honored_by_poll(self, cli):
        established(cli)
        code, body = cli("bob", "resend", "1")
        assert code == 0
        code, body = cli("alice", "poll-resends")
        assert code == 0 and body["result"]["honored"] == 1
        code, body = cli("bob", "receive")
        assert body["result"]["received"] == 1
        code, body = cli("bob", "use", "1")
        assert code == 0

    def test_grant_to_unregistered_receiver_not_found(self, cli):
        cli("alice", "create-table", "items", "id", "name", "qty")
        cli("alice", "add", "1", "items", "it-100", "widget", "7")
        code, body = cli("alice", "grant", "1", "nobody")
        assert code == 4
        assert body["error"]["category"] == "not_found"

    def test_grant_with_column_projection(self, cli):
        cli("bob", "register")
        cli("alice", "create-table", "items", "id", "name", "qty")
        cli("alice", "add", "1", "items", "it-100", "widget", "7")
        code, _ = cli("alice", "grant", "1", "bob", "--columns", "id,qty")
        assert code == 0
        cli("alice", "send", "1")
        cli("bob", "receive")
        code, body = cli("bob", "use", "1")
        assert body["result"]["values"] == {"id": "it-100", "qty": "7"}

    def test_flush_reports_empty_outbox(self, cli):
        code, body = cli("alice", "flush")
        assert code == 0 and body["result"]["outbox_empty"] is True


class TestMailboxFlow:
    def invoke(self, tmp_path, capsys, user: str, *argv: str):
        code = main([
            "--json", list(argv)[0],
            "--profile", str(tmp_path / f"mb-{user}"),
            "--user", user, "--password", f"{user}-pw",
            "--mailbox", str(tmp_path / "mail"),
            *argv[1:],
        ])
        out, _ = capsys.readouterr()
        return code, json.loads(out.strip().splitlines()[-1])

    def test_share_and_sync_over_mailbox(self, tmp_path, capsys):
        run = lambda user, *argv: self.invoke(tmp_path, capsys, user, *argv)
        assert run("bob", "register")[0] == 0
        assert run("alice", "create-table", "items", "id", "qty")[0] == 0
        assert run("alice", "add", "3", "items", "it-300", "5")[0] == 0
        code, body = run("alice", "grant", "3", "bob")
        assert code == 0 and body["result"]["delivered"] is True
        assert run("alice", "send", "3")[0] == 0
        code, body = run("bob", "mailbox-sync")
        assert code == 0
        assert body["result"]["received"] == 1
        code, body = run("bob", "use", "3")
        assert code == 0
        assert body["result"]["values"] == {"id": "it-300", "qty": "5"}

    def test_mailbox_sync_requires_mailbox_backend(self, tmp_path, capsys):
        code = main([
            "mailbox-sync", "--profile", str(tmp_path / "p"), "--user", "x",
            "--password", "y", "--connect", "127.0.0.1:9",
        ])
        capsys.readouterr()
        assert code == 2


class TestServe:
    def test_second_bind_fails_cleanly(self, server, tmp_path, capsys):
        code = main([
            "serve", "--listen", server, "--journal",
            str(tmp_path / "second.journal"),
        ])
        _, err = capsys.readouterr()
        assert code == 2
        assert "cannot listen" in err

    def test_malformed_listen_address(self, tmp_path, capsys):
        code = main([
            "serve", "--listen", "no-port", "--journal",
            str(tmp_path / "j"),
        ])
        capsys.readouterr()
        assert code == 2


class TestScenarioCommands:
    def test_list_names_catalog(self, capsys):
        code = main(["--json", "scenario", "list"])
        out, _ = capsys.readouterr()
        names = json.loads(out)["result"]["scenarios"]
        assert code == 0
        assert "redirection-attack" in names
        assert len(names) == 7

    def test_run_passing_scenario(self, capsys):
        code = main(["--json", "scenario", "run", "rotation-race-retain-old",
                     "--seed", "1"])
        out, _ = capsys.readouterr()
        body = json.loads(out)
        assert code == 0
        assert body["result"]["passed"] is True
        assert body["result"]["seed"] == 1

    def test_unknown_scenario_is_config_error(self, capsys):
        code = main(["scenario", "run", "no-such-thing"])
        _, err = capsys.readouterr()
        assert code == 2
        assert "no such scenario" in err


class TestBenchCommands:
    def test_bench_run_reports_overhead(self, capsys):
        code = main(["--json", "bench", "run", "--dossiers", "30",
                     "--shared", "20", "--repeats", "1"])
        out, _ = capsys.readouterr()
        result = json.loads(out)["result"]
        assert code == 0
        assert result["num_dossiers"] == 30
        assert result["share_encrypts"] == 6
        assert "overhead_pct" in result

    def test_bench_sweep_writes_grid_csv(self, tmp_path, capsys):
        out_csv = tmp_path / "grid.csv"
        code = main(["bench", "sweep", "--dossiers", "20,30",
                     "--shared", "0,50", "--csv", str(out_csv),
                     "--repeats", "1"])
        capsys.readouterr()
        assert code == 0
        with open(out_csv, encoding="utf-8", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 4
        assert {row["pct_shared"] for row in rows} == {"0.0", "50.0"}
        assert {row["num_dossiers"] for row in rows} == {"20", "30"}

    def test_invalid_bench_config_exit_2(self, capsys):
        code = main(["bench", "run", "--dossiers", "10", "--shared", "150"])
        capsys.readouterr()
        assert code == 2

    def test_malformed_sweep_grid_exit_2(self, tmp_path, capsys):
        code = main(["bench", "sweep", "--dossiers", "10,x", "--shared", "0",
                     "--csv", str(tmp_path / "x.csv")])
        capsys.readouterr()
        assert code == 2
