"""End-to-end client tests: grant, send, receive, use, revoke, resend."""

from __future__ import annotations

import random

import pytest

from rowshare.client import AccessGrant, ClientAgent, ReceiverPhase, ServiceBackend, project
from rowshare.crypto import Ciphertext, decrypt_row, unwrap_key
from rowshare.errors import (
    ConfigError,
    IntegrityError,
    KeyNotFoundError,
    MissingRowError,
    NotFoundError,
    NotOwnerError,
    RowShareError,
    UnreachableError,
    WrongKeyError,
)
from rowshare.rowstore import Origin, RevokePolicy, Row
from rowshare.wire import LocalTransport

COLUMNS = ["id", "name", "qty"]


def setup_owner(make_client, name="alice", dossier=1, values=("it-100", "widget", "7")):
    owner = make_client(name)
    owner.create_table("items", COLUMNS)
    owner.add_dossier(dossier, "items", list(values))
    return owner


def same_content(a: Row, b: Row) -> bool:
    return (a.table, a.pk, a.fields) == (b.table, b.pk, b.fields)


def pending_for(service, receiver_id):
    return [row for row in service.pending.values() if row.receiver_id == receiver_id]


class TestGrant:
    def test_deposited_key_unwraps_only_for_receiver(self, service, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        carol = make_client("carol")
        assert alice.grant(1, "bob") is True

        record = service.get_key("bob", 1, None)
        key = unwrap_key(record.wrapped_key, bob.keypair.private)
        assert len(key) == 32
        with pytest.raises(WrongKeyError):
            unwrap_key(record.wrapped_key, carol.keypair.private)

    def test_grant_to_unregistered_receiver(self, make_client):
        alice = setup_owner(make_client)
        with pytest.raises(RowShareError, match="not registered"):
            alice.grant(1, "ghost")

    def test_grant_twice_supersedes_with_higher_version(self, service, make_client):
        alice = setup_owner(make_client)
        make_client("bob")
        alice.grant(1, "bob")
        alice.grant(1, "bob")
        assert service.get_key("bob", 1, None).key_version == 2

    def test_grant_must_keep_key_column(self, make_client):
        alice = setup_owner(make_client)
        make_client("bob")
        with pytest.raises(ConfigError, match="key column"):
            alice.grant(1, "bob", allowed_columns={"name"})

    def test_grant_unknown_column(self, make_client):
        alice = setup_owner(make_client)
        make_client("bob")
        with pytest.raises(ConfigError, match="unknown columns"):
            alice.grant(1, "bob", allowed_columns={"id", "price"})

    def test_grant_without_owning_dossier(self, make_client):
        alice = make_client("alice")
        make_client("bob")
        with pytest.raises(NotOwnerError):
            alice.grant(5, "bob")


class TestProjection:
    ROW = Row("items", "it-1", (("id", "it-1"), ("name", "widget"), ("qty", "7")),
              Origin.OWNED, None)

    def grant(self, columns):
        return AccessGrant(1, "bob", frozenset(columns), 1)

    def test_restricts_to_allowed_columns(self):
        out = project(self.ROW, self.grant({"id", "qty"}))
        assert out.fields == (("id", "it-1"), ("qty", "7"))

    def test_full_grant_is_identity(self):
        out = project(self.ROW, self.grant(set(COLUMNS)))
        assert out.fields == self.ROW.fields

    def test_idempotent(self):
        grant = self.grant({"id", "name"})
        once = project(self.ROW, grant)
        assert project(once, grant) == once

    def test_restriction_travels_to_receiver(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob", allowed_columns={"id", "name"})
        alice.send(1)
        bob.receive()
        row = bob.use(1)
        assert row.fields == (("id", "it-100"), ("name", "widget"))

    def test_unequal_projections_share_one_receiver_table(self, make_client):
        # Two dossiers from one origin table, granted with different column
        # subsets, must both land in the receiver's materialized table.
        alice = setup_owner(make_client)
        alice.add_dossier(2, "items", ["it-200", "gadget", "3"])
        bob = make_client("bob")
        alice.grant(1, "bob", allowed_columns={"id", "name"})
        alice.grant(2, "bob", allowed_columns={"id", "qty"})
        alice.send(1)
        alice.send(2)
        bob.receive()
        assert bob.use(1).fields == (("id", "it-100"), ("name", "widget"))
        assert bob.use(2).fields == (("id", "it-200"), ("qty", "3"))
        assert set(bob.store.tables["items"].columns) == {"id", "name", "qty"}


class TestSend:
    def test_one_key_and_one_row_per_send(self, service, make_client):
        alice = setup_owner(make_client)
        make_client("bob")
        alice.grant(1, "bob")
        assert alice.send(1) is True
        assert sorted(service.keys[(1, "bob")]) == [1, 2]
        assert len(pending_for(service, "bob")) == 1

    def test_fanout_ciphertexts_pairwise_distinct(self, service, make_client):
        alice = setup_owner(make_client)
        receivers = ["bob", "carol", "dave"]
        agents = {name: make_client(name) for name in receivers}
        for name in receivers:
            alice.grant(1, name)
        alice.send(1)

        blobs = [row.encrypted_row for row in service.pending.values()]
        assert len(blobs) == 3
        assert len(set(blobs)) == 3
        for name, agent in agents.items():
            assert agent.receive() == 1
            assert same_content(agent.use(1), alice.use(1))

    def test_send_without_grants(self, make_client):
        alice = setup_owner(make_client)
        with pytest.raises(NotFoundError, match="no grants"):
            alice.send(1)

    def test_send_rotates_key_old_one_fails(self, service, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        bob.use(1)
        old_key = bob.key_cache[1][0]

        alice.update_dossier(1, ["it-100", "widget", "8"])
        alice.send(1)
        blob = pending_for(service, "bob")[0].encrypted_row
        with pytest.raises(IntegrityError):
            decrypt_row(Ciphertext.from_bytes(blob), old_key)

        bob.receive()
        assert bob.use(1).value("qty") == "8"

    def test_update_without_send_stays_local(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        alice.update_dossier(1, ["it-100", "widget", "99"])
        assert bob.use(1).value("qty") == "7"


class TestReceive:
    def test_two_pendings_then_zero(self, make_client):
        alice = setup_owner(make_client)
        alice.add_dossier(2, "items", ["it-200", "gadget", "3"])
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.grant(2, "bob")
        alice.send(1)
        alice.send(2)

        assert bob.receive() == 2
        assert bob.store.pending_ids() == [1, 2]
        assert bob.receive() == 0

    def test_receive_with_nothing_pending(self, make_client):
        bob = make_client("bob")
        assert bob.receive() == 0

    def test_crash_before_ack_redelivers_harmlessly(self, service, make_client, tmp_path):
        alice = setup_owner(make_client)
        alice.add_dossier(2, "items", ["it-200", "gadget", "3"])

        class LinkDropsBeforeAck:
            def __init__(self, inner):
                self.inner = inner
                self.fetches = 0

            def __getattr__(self, name):
                return getattr(self.inner, name)

            def fetch_rows(self, ack_ids):
                self.fetches += 1
                if self.fetches == 2:
                    raise UnreachableError("link dropped before acknowledgment")
                return self.inner.fetch_rows(ack_ids)

        backend = LinkDropsBeforeAck(ServiceBackend(LocalTransport(service)))
        bob = ClientAgent("bob", tmp_path / "profile-bob", backend, "bob-pw")
        alice.grant(1, "bob")
        alice.grant(2, "bob")
        alice.send(1)
        alice.send(2)

        with pytest.raises(UnreachableError):
            bob.receive()
        assert bob.store.pending_ids() == [1, 2]  # persisted despite lost ack

        assert bob.receive() == 2  # redelivered, restaged, finally acked
        assert bob.receive() == 0
        assert same_content(bob.use(1), alice.use(1))


class TestUse:
    def test_receiver_sees_owner_projection(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        row = bob.use(1)
        assert same_content(row, alice.use(1))
        assert row.origin is Origin.SHARED
        assert row.shared_id == 1

    def test_owner_use_returns_own_row(self, make_client):
        alice = setup_owner(make_client)
        row = alice.use(1)
        assert row.origin is Origin.OWNED
        assert row.value("name") == "widget"

    def test_use_without_any_grant(self, make_client):
        bob = make_client("bob")
        with pytest.raises(KeyNotFoundError):
            bob.use(42)

    def test_use_after_expiry(self, make_client, fake_clock):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob", expiry=fake_clock.now + 3600)
        alice.send(1)  # the rotated key inherits the grant's expiry
        bob.receive()
        bob.use(1)

        fake_clock.advance(7200)
        with pytest.raises(KeyNotFoundError):
            bob.use(1)


class TestRevoke:
    def test_use_after_revoke_keep_cached(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        bob.use(1)

        assert alice.revoke(1, "bob") is True
        with pytest.raises(KeyNotFoundError):
            bob.use(1)
        assert bob.store.shared_ids() == [1]  # ciphertext kept for a re-grant

    def test_regrant_restores_access_across_restart(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        bob.shutdown()

        alice.revoke(1, "bob")
        bob = make_client("bob")
        with pytest.raises(KeyNotFoundError):
            bob.use(1)

        alice.grant(1, "bob")
        assert same_content(bob.use(1), alice.use(1))

    def test_use_after_revoke_delete_local(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob", revoke_policy=RevokePolicy.DELETE_LOCAL)
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        bob.use(1)

        alice.revoke(1, "bob")
        with pytest.raises(KeyNotFoundError):
            bob.use(1)
        assert bob.store.shared_ids() == []

        # A bare re-grant is not enough: the ciphertext is gone until a resend.
        alice.grant(1, "bob")
        with pytest.raises(MissingRowError):
            bob.use(1)
        bob.request_resend(1)
        assert alice.poll_resends() == 1
        assert bob.receive() == 1
        assert same_content(bob.use(1), alice.use(1))

    def test_revoked_receiver_excluded_from_next_send(self, service, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        carol = make_client("carol")
        alice.grant(1, "bob")
        alice.grant(1, "carol")
        alice.send(1)
        assert bob.receive() == 1
        assert carol.receive() == 1

        alice.revoke(1, "bob")
        alice.send(1)
        assert pending_for(service, "bob") == []
        assert bob.receive() == 0
        assert carol.receive() == 1
        assert same_content(carol.use(1), alice.use(1))

    def test_revoke_nonexistent_grant_is_noop(self, make_client):
        alice = setup_owner(make_client)
        make_client("bob")
        assert alice.revoke(1, "bob") is False

    def test_revoke_one_dossier_leaves_the_other(self, make_client):
        alice = setup_owner(make_client)
        alice.add_dossier(2, "items", ["it-200", "gadget", "3"])
        bob = make_client("bob")
        for d in (1, 2):
            alice.grant(d, "bob")
            alice.send(d)
        assert bob.receive() == 2

        alice.revoke(1, "bob")
        with pytest.raises(KeyNotFoundError):
            bob.use(1)
        assert same_content(bob.use(2), alice.use(2))


class TestResend:
    def test_restores_after_receiver_loses_store(self, make_client, tmp_path):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        bob.use(1)
        bob.shutdown()
        for name in ("store.script", "store.journal"):
            (tmp_path / "profile-bob" / name).unlink()

        bob = make_client("bob")
        with pytest.raises(MissingRowError):
            bob.use(1)
        bob.request_resend(1)
        assert alice.poll_resends() == 1
        assert bob.receive() == 1
        assert same_content(bob.use(1), alice.use(1))

    def test_owner_restart_falls_back_to_rotation(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        alice.shutdown()

        alice = make_client("alice")  # volatile dossier key lost
        bob.request_resend(1)
        assert alice.poll_resends() == 1
        assert bob.receive() == 1
        assert same_content(bob.use(1), alice.use(1))

    def test_refused_without_grant(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        alice.revoke(1, "bob")

        bob.request_resend(1)
        assert alice.poll_resends() == 0
        assert bob.receive() == 0

    def test_unknown_dossier_rejected_at_service(self, make_client):
        bob = make_client("bob")
        with pytest.raises(NotFoundError):
            bob.request_resend(404)


class TestKeypairRotation:
    def test_retained_old_key_still_unwraps(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()

        bob.rotate_keypair(retain_old=True)
        assert same_content(bob.use(1), alice.use(1))

    def test_dropped_old_key_needs_resend(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()

        bob.rotate_keypair(retain_old=False)
        with pytest.raises(KeyNotFoundError):
            bob.use(1)

        bob.request_resend(1)
        assert alice.poll_resends() == 1  # fetches the fresh public key
        assert bob.receive() == 1
        assert same_content(bob.use(1), alice.use(1))

    def test_rotation_survives_restart(self, make_client):
        bob = make_client("bob")
        bob.rotate_keypair(retain_old=True)
        public = bob.keypair.public
        bob.shutdown()
        again = make_client("bob")
        assert again.keypair.public == public
        assert len(again.old_private_keys) == 1


class TestReceiverPhases:
    def test_lifecycle(self, make_client):
        alice = setup_owner(make_client)
        bob = make_client("bob")
        assert bob.receiver_phase(1) == ReceiverPhase.IDLE

        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        assert bob.receiver_phase(1) == ReceiverPhase.HAS_CIPHERTEXT

        bob.use(1)
        assert bob.receiver_phase(1) == ReceiverPhase.DECRYPTED

        alice.send(1)
        bob.receive()  # fresh ciphertext staged, old key still cached
        assert bob.receiver_phase(1) == ReceiverPhase.HAS_KEY

        bob.use(1)
        assert bob.receiver_phase(1) == ReceiverPhase.DECRYPTED


class TestOfflineOutbox:
    class SwitchableTransport:
        def __init__(self, inner):
            self.inner = inner
            self.down = False

        def call(self, op, payload, session=None):
            if self.down:
                raise UnreachableError("network down")
            return self.inner.call(op, payload, session)

    def test_send_queues_offline_and_flushes(self, service, make_client, tmp_path):
        transport = self.SwitchableTransport(LocalTransport(service))
        alice = ClientAgent(
            "alice", tmp_path / "profile-alice",
            ServiceBackend(transport), "alice-pw",
        )
        alice.create_table("items", COLUMNS)
        alice.add_dossier(1, "items", ["it-100", "widget", "7"])
        bob = make_client("bob")
        alice.grant(1, "bob")

        transport.down = True
        assert alice.send(1) is False
        assert len(alice.outbox) == 2
        assert bob.receive() == 0

        transport.down = False
        assert alice.flush_outbox() is True
        assert alice.outbox == []
        assert bob.receive() == 1
        assert same_content(bob.use(1), alice.use(1))

    def test_later_deposit_drains_queue_in_order(self, service, make_client, tmp_path):
        transport = self.SwitchableTransport(LocalTransport(service))
        alice = ClientAgent(
            "alice", tmp_path / "profile-alice",
            ServiceBackend(transport), "alice-pw",
        )
        alice.create_table("items", COLUMNS)
        alice.add_dossier(1, "items", ["it-100", "widget", "7"])
        bob = make_client("bob")
        alice.grant(1, "bob")

        transport.down = True
        alice.send(1)
        transport.down = False
        assert alice.send(1) is True  # flushes the queue before depositing
        assert bob.receive() == 2  # both the queued and the fresh delivery
        assert service.get_key("bob", 1, None).key_version == 3
        assert same_content(bob.use(1), alice.use(1))


class TestOwnership:
    def test_second_claimant_rejected(self, make_client):
        alice = setup_owner(make_client, dossier=7)
        make_client("bob")
        alice.grant(7, "bob")

        mallory = make_client("mallory")
        mallory.create_table("items", COLUMNS)
        mallory.add_dossier(7, "items", ["it-666", "forged", "1"])
        with pytest.raises(NotOwnerError):
            mallory.grant(7, "bob")

    def test_duplicate_local_dossier_id(self, make_client):
        alice = setup_owner(make_client)
        with pytest.raises(ConfigError):
            alice.add_dossier(1, "items", ["it-999", "other", "2"])


class TestPersistenceAndBlindness:
    SENTINEL = "SENTINEL-57f2ca96-never-on-wire"

    def test_plaintext_never_leaves_owner(self, service, make_client, tmp_path):
        alice = make_client("alice")
        alice.create_table("items", COLUMNS)
        alice.add_dossier(1, "items", ["it-100", self.SENTINEL, "7"])
        bob = make_client("bob")
        alice.grant(1, "bob")
        alice.send(1)
        bob.receive()
        assert bob.use(1).value("name") == self.SENTINEL
        bob.shutdown()
        service.close()

        marker = self.SENTINEL.encode()
        assert marker in (tmp_path / "profile-alice" / "store.journal").read_bytes()
        for path in sorted((tmp_path / "profile-bob").iterdir()):
            assert marker not in path.read_bytes(), path
        assert marker not in (tmp_path / "service.journal").read_bytes()

    def test_randomized_history_stays_consistent(self, make_client):
        rng = random.Random(7)
        alice = setup_owner(make_client)
        bob = make_client("bob")
        granted = False
        delivered = False

        for step in range(120):
            op = rng.choice(["grant", "send", "receive", "use", "revoke", "update"])
            if op == "grant":
                alice.grant(1, "bob")
                granted = True
            elif op == "send" and granted:
                alice.send(1)
            elif op == "receive":
                delivered = bob.receive() > 0 or delivered
            elif op == "update":
                alice.update_dossier(1, ["it-100", "widget", str(step)])
            elif op == "revoke":
                alice.revoke(1, "bob")
                granted = False
            elif op == "use":
                if granted and delivered:
                    assert bob.use(1).pk == "it-100"
                elif not granted:
                    with pytest.raises((KeyNotFoundError, MissingRowError)):
                        bob.use(1)
