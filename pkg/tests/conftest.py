"""Shared fixtures: a fast in-process service and client factories."""

from __future__ import annotations

import pytest

from rowshare.client import ClientAgent, ServiceBackend
from rowshare.rowstore import RevokePolicy
from rowshare.synchronizer import SynchronizerService
from rowshare.wire import LocalTransport

# Real logins use a deliberately slow digest; tests do not need that.
FAST_ITERATIONS = 10


class FakeClock:
    def __init__(self, start: float = 1_000_000.0) -> None:
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def service(tmp_path, fake_clock) -> SynchronizerService:
    svc = SynchronizerService(
        tmp_path / "service.journal",
        clock=fake_clock,
        pbkdf2_iterations=FAST_ITERATIONS,
    )
    yield svc
    svc.close()


@pytest.fixture
def make_client(service, tmp_path):
    """Factory for agents talking to the shared service in-process."""

    def make(
        name: str,
        revoke_policy: RevokePolicy = RevokePolicy.KEEP_CACHED,
        svc: SynchronizerService | None = None,
    ) -> ClientAgent:
        backend = ServiceBackend(LocalTransport(svc or service))
        return ClientAgent(
            name, tmp_path / f"profile-{name}", backend, f"{name}-pw", revoke_policy
        )

    return make
