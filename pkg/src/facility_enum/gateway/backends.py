"""Model backends.

A backend turns a :class:`BackendRequest` into raw reply text.  The remote
backend talks to an OpenAI-compatible chat-completions endpoint; the oracle
backend answers from ground-truth fixtures, optionally flipping answers at a
seeded rate, and stands in for the vision model in offline runs.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..core import FacilityType, Verdict
from ..errors import ConfigError, ProtocolError, SchemaError, TransportError, ValidationError
from .queries import ConnectionQuery, CountQuery, OmissionQuery, Query, SameRoomQuery

logger = logging.getLogger(__name__)

LLM_URL_ENV = "FE_LLM_URL"
LLM_KEY_ENV = "FE_LLM_KEY"
LLM_MODEL_ENV = "FE_LLM_MODEL"


@dataclass(frozen=True)
class BackendRequest:
    plan_id: str
    query: Query
    prompt: str
    image: bytes | None = field(default=None, repr=False)


class Backend:
    name = "backend"
    needs_image = True

    def __init__(self):
        self._count_lock = threading.Lock()
        self.invocations = 0

    def _tick(self) -> None:
        with self._count_lock:
            self.invocations += 1

    def complete(self, request: BackendRequest) -> str:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleFixture:
    """Ground-truth answers for one plan."""

    plan_id: str
    connection: dict[FacilityType, dict[int, bool]] = field(default_factory=dict)
    same_room: set[tuple[int, int]] = field(default_factory=set)
    missing: dict[FacilityType, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> OracleFixture:
        if not isinstance(data, Mapping) or not isinstance(data.get("plan_id"), str):
            raise SchemaError("missing or non-string", "plan_id")
        try:
            connection = {
                FacilityType.parse(fac): {int(k): bool(v) for k, v in doors.items()}
                for fac, doors in data.get("connection", {}).items()
            }
            pairs = set()
            for pair in data.get("same_room", []):
                a, b = (int(v) for v in pair)
                if a == b:
                    raise SchemaError(f"pair {pair} repeats a door", "same_room")
                pairs.add((min(a, b), max(a, b)))
            missing = {FacilityType.parse(fac): int(n) for fac, n in data.get("missing", {}).items()}
        except (AttributeError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise SchemaError(str(exc), "<root>") from exc
        return cls(data["plan_id"], connection, pairs, missing)

    @classmethod
    def load(cls, path: str | Path) -> OracleFixture:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "connection": {
                fac.value: {str(k): v for k, v in sorted(doors.items())}
                for fac, doors in sorted(self.connection.items(), key=lambda kv: list(FacilityType).index(kv[0]))
            },
            "same_room": [list(p) for p in sorted(self.same_room)],
            "missing": {
                fac.value: n
                for fac, n in sorted(self.missing.items(), key=lambda kv: list(FacilityType).index(kv[0]))
            },
        }

    def connects(self, facility: FacilityType, door_id: int) -> bool:
        return self.connection.get(FacilityType.parse(facility), {}).get(door_id, False)

    def same(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.same_room

    def true_count(self, facility: FacilityType) -> int:
        """Rooms implied by the fixture: same-room classes of connected doors plus misses."""
        facility = FacilityType.parse(facility)
        doors = sorted(d for d, yes in self.connection.get(facility, {}).items() if yes)
        parent = {d: d for d in doors}

        def root(x):
            while parent[x] != x:
                x = parent[x]
            return x

        for a, b in self.same_room:
            if a in parent and b in parent:
                parent[root(a)] = root(b)
        return len({root(d) for d in doors}) + self.missing.get(facility, 0)


def _unit_hash(*parts: Any) -> float:
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


class OracleBackend(Backend):
    """Answers from fixtures; each verdict is flipped with probability ``error_rate``.

    Flip decisions are a pure function of (seed, plan, query), so reruns are
    reproducible and the flips at a lower rate are a subset of those at a
    higher rate for the same seed.  Omission counts are always exact; the
    whole-image baseline count is off by one with probability ``error_rate``.
    """

    needs_image = False

    def __init__(self, fixtures: Mapping[str, OracleFixture] | Iterable[OracleFixture] | OracleFixture,
                 error_rate: float = 0.0, seed: int = 0):
        super().__init__()
        if isinstance(fixtures, OracleFixture):
            fixtures = [fixtures]
        if not isinstance(fixtures, Mapping):
            fixtures = {fx.plan_id: fx for fx in fixtures}
        if not 0.0 <= error_rate <= 1.0:
            raise ValidationError("error_rate must lie in [0, 1]")
        self.fixtures = dict(fixtures)
        self.error_rate = error_rate
        self.seed = seed
        self.flips = 0

    @property
    def name(self) -> str:
        return f"oracle(eps={self.error_rate:g},seed={self.seed})"

    def _flip(self, plan_id: str, query: Query) -> bool:
        if self.error_rate <= 0.0:
            return False
        return _unit_hash(self.seed, plan_id, query.canonical()) < self.error_rate

    def complete(self, request: BackendRequest) -> str:
        self._tick()
        q = request.query
        try:
            fx = self.fixtures[request.plan_id]
        except KeyError:
            raise ConfigError(f"no oracle fixture for plan {request.plan_id!r}") from None
        if isinstance(q, ConnectionQuery):
            truth = fx.connects(q.facility, q.door_id)
            why = f"fixture marks door {q.door_id} as {'connected' if truth else 'not connected'} to {q.facility}"
        elif isinstance(q, SameRoomQuery):
            truth = fx.same(q.door_id_a, q.door_id_b)
            why = f"fixture lists doors {q.door_id_a} and {q.door_id_b} as {'one room' if truth else 'different rooms'}"
        elif isinstance(q, OmissionQuery):
            n = fx.missing.get(FacilityType.parse(q.facility), 0)
            return f"{n}. Reason: fixture records {n} unmarked {q.facility} instance(s)."
        elif isinstance(q, CountQuery):
            n = fx.true_count(q.facility)
            if self._flip(request.plan_id, q):
                n = n + 1 if n == 0 or _unit_hash(self.seed, "dir", request.plan_id, q.canonical()) < 0.5 else n - 1
            return f"{n}. Reason: whole-plan count from fixture."
        else:
            raise TypeError(f"unsupported query {q!r}")
        if self._flip(request.plan_id, q):
            with self._count_lock:
                self.flips += 1
            truth = not truth
        return f"{Verdict.of(truth).value.capitalize()}. Reason: {why}."


# ---------------------------------------------------------------------------
# remote


class TokenBucket:
    def __init__(self, rate_per_s: float, burst: int = 1):
        self.rate = rate_per_s
        self.capacity = max(1, burst)
        self.tokens = float(self.capacity)
        self.stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class RemoteBackend(Backend):
    """OpenAI-compatible chat-completions client sending the prompt plus one PNG."""

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        *,
        max_in_flight: int = 4,
        rate_per_s: float | None = None,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 120.0,
        client=None,
    ):
        super().__init__()
        self.url = url or os.environ.get(LLM_URL_ENV) or "https://api.openai.com/v1"
        self.api_key = api_key or os.environ.get(LLM_KEY_ENV)
        if not self.api_key:
            raise ConfigError(f"remote backend needs an API key; set {LLM_KEY_ENV}")
        self.model = model or os.environ.get(LLM_MODEL_ENV) or "gpt-5"
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._bucket = TokenBucket(rate_per_s, burst=max_in_flight) if rate_per_s else None
        if client is None:
            import httpx

            client = httpx.Client(timeout=timeout_s)
        self._client = client

    @property
    def name(self) -> str:
        return f"remote({self.model})"

    @property
    def endpoint(self) -> str:
        url = self.url.rstrip("/")
        return url if url.endswith("/chat/completions") else url + "/chat/completions"

    def payload(self, request: BackendRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = [{"type": "text", "text": request.prompt}]
        if request.image is not None:
            b64 = base64.b64encode(request.image).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {"model": self.model, "messages": [{"role": "user", "content": content}]}

    def complete(self, request: BackendRequest) -> str:
        import httpx

        body = self.payload(request)
        headers = {"authorization": f"Bearer {self.api_key}"}
        last = ""
        for attempt in range(1, self.max_attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            with self._slots:
                self._tick()
                try:
                    resp = self._client.post(self.endpoint, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    resp, last = None, f"{type(exc).__name__}: {exc}"
            if resp is not None:
                if resp.status_code < 400:
                    return self._extract(resp)
                if resp.status_code != 429 and resp.status_code < 500:
                    raise ProtocolError(f"model endpoint rejected request: HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
        raise TransportError(f"model endpoint {self.endpoint} failed: {last}", attempts=self.max_attempts)

    @staticmethod
    def _extract(resp) -> str:
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected chat-completions payload: {exc}") from exc
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, Mapping))
        if not isinstance(content, str):
            raise ProtocolError("chat-completions content is not text")
        return content
