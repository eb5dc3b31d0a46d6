"""Operator command line: serve, drive clients, run scenarios, benchmark.

One process per invocation.  Client commands need a profile directory, a
user name, a password, and exactly one backend: ``--connect HOST:PORT`` for
a synchronizer over TCP or ``--mailbox DIR`` for mailbox synchronization.
Every flag falls back to an environment variable (ROWSHARE_PROFILE,
ROWSHARE_USER, ROWSHARE_PASSWORD, ROWSHARE_SERVICE, ROWSHARE_MAILBOX).

Output goes to stdout: human-readable lines by default, or one JSON
envelope ``{"schema": 1, "ok": bool, "result"|"error": ...}`` with
``--json``.  Errors exit nonzero with the category on stderr (or in the
JSON envelope); the exit-code table is part of the interface:

    0  success                        6  not the dossier's owner
    2  bad usage or configuration     7  authentication failed
    3  peer unreachable               8  cryptographic rejection
    4  no such record/user/table      9  duplicate record/user/table
    5  no key (revoked or expired)   10  malformed frame or file
    1  any other error               11  scenario assertions failed

The deposit queue is in-memory, so a ``grant``/``send`` that could not
reach the synchronizer exits with code 3 after saving local state; rerun
the command once the synchronizer is reachable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import BenchConfig, compare, csv_row, sweep
from .client import ClientAgent, ServiceBackend
from .crypto import hex_encode
from .errors import ConfigError, RowShareError, UnreachableError
from .faultsim import list_scenarios, run_scenario
from .mailbox import Mailbox, MailboxBackend
from .synchronizer import SynchronizerService
from .wire import TcpTransport, WireServer

logger = logging.getLogger(__name__)

EXIT_BY_CATEGORY = {
    "bad_config": 2,
    "unreachable": 3,
    "not_found": 4,
    "unknown_user": 4,
    "unknown_table": 4,
    "missing_row": 4,
    "key_not_found": 5,
    "key_expired": 5,
    "not_owner": 6,
    "bad_credentials": 7,
    "session_expired": 7,
    "wrong_key": 8,
    "integrity": 8,
    "bad_signature": 8,
    "bad_hex": 8,
    "duplicate_user": 9,
    "duplicate_table": 9,
    "duplicate_row": 9,
    "protocol": 10,
    "script_format": 10,
}
EXIT_SCENARIO_FAILED = 11


def _env_or_flag(value: str | None, env: str, what: str) -> str:
    got = value or os.environ.get(env)
    if not got:
        raise ConfigError(f"no {what}: pass the flag or set {env}")
    return got


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"port must be an integer, got {port!r}") from None


def _agent(args: argparse.Namespace) -> ClientAgent:
    profile = _env_or_flag(args.profile, "ROWSHARE_PROFILE", "profile directory")
    user = _env_or_flag(args.user, "ROWSHARE_USER", "user name")
    password = _env_or_flag(args.password, "ROWSHARE_PASSWORD", "password")
    connect = args.connect or os.environ.get("ROWSHARE_SERVICE")
    maildir = args.mailbox or os.environ.get("ROWSHARE_MAILBOX")
    if bool(connect) == bool(maildir):
        raise ConfigError(
            "pick exactly one backend: --connect HOST:PORT or --mailbox DIR"
        )
    if connect:
        host, port = _parse_addr(connect)
        backend = ServiceBackend(TcpTransport(host, port))
    else:
        backend = MailboxBackend(Mailbox(maildir))
    return ClientAgent(user, profile, backend, password)


def _require_delivery(agent: ClientAgent, action: str) -> None:
    if agent.outbox:
        raise UnreachableError(
            f"{action} recorded locally but {len(agent.outbox)} deposit(s) "
            "could not reach the synchronizer; this queue does not survive "
            "process exit, so rerun the command when it is reachable"
        )


# -- commands ----------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> tuple[int, dict]:
    host, port = _parse_addr(args.listen)
    service = SynchronizerService(args.journal)
    try:
        server = WireServer((host, port), service)
    except OSError as exc:
        service.close()
        raise ConfigError(f"cannot listen on {args.listen}: {exc}") from exc
    print(f"synchronizer listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
    return 0, {"listened": args.listen}


def cmd_register(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        if not agent.online:
            raise UnreachableError("synchronizer unreachable, not registered")
        return 0, {
            "user": agent.user_id,
            "public_key": hex_encode(agent.keypair.public),
        }
    finally:
        agent.shutdown()


def cmd_create_table(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        agent.create_table(args.table, args.columns)
        return 0, {"table": args.table, "columns": args.columns}
    finally:
        agent.shutdown()


def cmd_add(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        row = agent.add_dossier(args.dossier, args.table, args.values)
        return 0, {"dossier": args.dossier, "table": row.table, "pk": row.pk}
    finally:
        agent.shutdown()


def cmd_update(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        row = agent.update_dossier(args.dossier, args.values)
        return 0, {"dossier": args.dossier, "table": row.table, "pk": row.pk}
    finally:
        agent.shutdown()


def cmd_grant(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        columns = set(args.columns.split(",")) if args.columns else None
        delivered = agent.grant(
            args.dossier, args.receiver, columns, expiry=args.expiry
        )
        if not delivered:
            _require_delivery(agent, "grant")
        return 0, {
            "dossier": args.dossier,
            "receiver": args.receiver,
            "delivered": delivered,
        }
    finally:
        agent.shutdown()


def cmd_send(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        delivered = agent.send(args.dossier)
        if not delivered:
            _require_delivery(agent, "send")
        return 0, {"dossier": args.dossier, "delivered": delivered}
    finally:
        agent.shutdown()


def cmd_receive(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        return 0, {"received": agent.receive()}
    finally:
        agent.shutdown()


def cmd_use(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        row = agent.use(args.dossier)
        return 0, {
            "dossier": args.dossier,
            "table": row.table,
            "values": dict(row.fields),
        }
    finally:
        agent.shutdown()


def cmd_revoke(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        existed = agent.revoke(args.dossier, args.receiver)
        return 0, {
            "dossier": args.dossier,
            "receiver": args.receiver,
            "revoked": existed,
        }
    finally:
        agent.shutdown()


def cmd_resend(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        agent.request_resend(args.dossier)
        return 0, {"dossier": args.dossier, "requested": True}
    finally:
        agent.shutdown()


def cmd_poll_resends(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        honored = agent.poll_resends()
        _require_delivery(agent, "resend")
        return 0, {"honored": honored}
    finally:
        agent.shutdown()


def cmd_flush(args: argparse.Namespace) -> tuple[int, dict]:
    agent = _agent(args)
    try:
        drained = agent.flush_outbox()
        return 0, {"outbox_empty": drained}
    finally:
        agent.shutdown()


def cmd_mailbox_sync(args: argparse.Namespace) -> tuple[int, dict]:
    if not (args.mailbox or os.environ.get("ROWSHARE_MAILBOX")):
        raise ConfigError("mailbox-sync needs --mailbox DIR (or ROWSHARE_MAILBOX)")
    if args.connect:
        raise ConfigError("mailbox-sync runs over --mailbox, not --connect")
    agent = _agent(args)
    try:
        received = agent.receive()
        honored = agent.poll_resends()
        drained = agent.flush_outbox()
        return 0, {
            "received": received,
            "resends_honored": honored,
            "outbox_empty": drained,
        }
    finally:
        agent.shutdown()


def cmd_scenario_list(args: argparse.Namespace) -> tuple[int, dict]:
    return 0, {"scenarios": list_scenarios()}


def cmd_scenario_run(args: argparse.Namespace) -> tuple[int, dict]:
    report = run_scenario(args.name, seed=args.seed, base_dir=args.dir)
    code = 0 if report.passed else EXIT_SCENARIO_FAILED
    return code, report.to_dict()


def _bench_config(args: argparse.Namespace, dossiers: int, shared: float) -> BenchConfig:
    return BenchConfig(
        num_dossiers=dossiers,
        pct_shared=shared,
        dossier_size_bytes=args.size,
        num_clients=args.clients,
        receivers_per_dossier=args.receivers,
        repeats=args.repeats,
        seed=args.seed,
    )


def cmd_bench_run(args: argparse.Namespace) -> tuple[int, dict]:
    config = _bench_config(args, args.dossiers, args.shared)
    encrypted, plain = compare(config)
    return 0, csv_row(encrypted, plain)


def cmd_bench_sweep(args: argparse.Namespace) -> tuple[int, dict]:
    try:
        sizes = [int(item) for item in args.dossiers.split(",")]
        shares = [float(item) for item in args.shared.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad sweep grid: {exc}") from None
    configs = [
        _bench_config(args, dossiers, shared)
        for dossiers in sizes
        for shared in shares
    ]
    results = sweep(configs, args.csv)
    return 0, {
        "csv": args.csv,
        "rows": [csv_row(encrypted, plain) for encrypted, plain in results],
    }


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowshare",
        description="End-to-end-encrypted row sharing over an untrusted synchronizer.",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a synchronizer service")
    serve.add_argument("--listen", required=True, metavar="HOST:PORT")
    serve.add_argument("--journal", required=True, help="service journal path")
    serve.set_defaults(func=cmd_serve)

    client_flags = argparse.ArgumentParser(add_help=False)
    client_flags.add_argument("--profile", help="profile directory [ROWSHARE_PROFILE]")
    client_flags.add_argument("--user", help="user name [ROWSHARE_USER]")
    client_flags.add_argument("--password", help="login password [ROWSHARE_PASSWORD]")
    client_flags.add_argument(
        "--connect", metavar="HOST:PORT", help="synchronizer address [ROWSHARE_SERVICE]"
    )
    client_flags.add_argument(
        "--mailbox", metavar="DIR", help="mailbox root directory [ROWSHARE_MAILBOX]"
    )

    def client_command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, parents=[client_flags], help=help_text)
        cmd.set_defaults(func=func)
        return cmd

    client_command("register", cmd_register, "create the profile and register")

    create = client_command("create-table", cmd_create_table, "declare a table")
    create.add_argument("table")
    create.add_argument("columns", nargs="+")

    add = client_command("add", cmd_add, "insert an owned row as a dossier")
    add.add_argument("dossier", type=int)
    add.add_argument("table")
    add.add_argument("values", nargs="+")

    update = client_command("update", cmd_update, "rewrite an owned dossier's row")
    update.add_argument("dossier", type=int)
    update.add_argument("values", nargs="+")

    grant = client_command("grant", cmd_grant, "give a receiver access")
    grant.add_argument("dossier", type=int)
    grant.add_argument("receiver")
    grant.add_argument("--columns", help="comma-separated allowed columns")
    grant.add_argument("--expiry", type=float, help="grant expiry (unix seconds)")

    send = client_command("send", cmd_send, "push the row to granted receivers")
    send.add_argument("dossier", type=int)

    client_command("receive", cmd_receive, "fetch and persist pending rows")

    use = client_command("use", cmd_use, "decrypt and print one dossier")
    use.add_argument("dossier", type=int)

    revoke = client_command("revoke", cmd_revoke, "withdraw a receiver's access")
    revoke.add_argument("dossier", type=int)
    revoke.add_argument("receiver")

    resend = client_command("resend", cmd_resend, "ask the owner to re-deliver")
    resend.add_argument("dossier", type=int)

    client_command("poll-resends", cmd_poll_resends, "honor queued resend requests")
    client_command("flush", cmd_flush, "retry queued deposits")
    client_command("mailbox-sync", cmd_mailbox_sync, "receive, honor resends, flush")

    scenario = sub.add_parser("scenario", help="fault-injection scenarios")
    scenario_sub = scenario.add_subparsers(dest="scenario_command", required=True)
    listing = scenario_sub.add_parser("list", help="list scenario names")
    listing.set_defaults(func=cmd_scenario_list)
    running = scenario_sub.add_parser("run", help="run one scenario")
    running.add_argument("name")
    running.add_argument("--seed", type=int, default=0)
    running.add_argument("--dir", help="keep working files here instead of a tempdir")
    running.set_defaults(func=cmd_scenario_run)

    bench = sub.add_parser("bench", help="benchmark harness")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    def bench_flags(cmd: argparse.ArgumentParser) -> None:
        cmd.add_argument("--size", type=int, default=200, help="dossier bytes")
        cmd.add_argument("--clients", type=int, default=2)
        cmd.add_argument("--receivers", type=int, default=1)
        cmd.add_argument("--repeats", type=int, default=3)
        cmd.add_argument("--seed", type=int, default=0)

    one = bench_sub.add_parser("run", help="one config, encrypted vs plain")
    one.add_argument("--dossiers", type=int, required=True)
    one.add_argument("--shared", type=float, required=True, help="percent shared")
    bench_flags(one)
    one.set_defaults(func=cmd_bench_run)

    grid = bench_sub.add_parser("sweep", help="grid of configs to CSV")
    grid.add_argument("--dossiers", required=True, help="comma-separated counts")
    grid.add_argument("--shared", required=True, help="comma-separated percents")
    grid.add_argument("--csv", required=True, help="output CSV path")
    bench_flags(grid)
    grid.set_defaults(func=cmd_bench_sweep)

    return parser


# -- entry point -------------------------------------------------------------------


def _render_human(result: dict) -> None:
    for key, value in result.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, indent=2)
        print(f"{key}: {value}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        code, result = args.func(args)
    except RowShareError as exc:
        if args.json:
            envelope = {
                "schema": 1,
                "ok": False,
                "error": {"category": exc.category, "message": str(exc)},
            }
            print(json.dumps(envelope))
        else:
            print(f"error ({exc.category}): {exc}", file=sys.stderr)
        return EXIT_BY_CATEGORY.get(exc.category, 1)
    if args.json:
        print(json.dumps({"schema": 1, "ok": code == 0, "result": result}))
    else:
        _render_human(result)
    return code


if __name__ == "__main__":
    sys.exit(main())
