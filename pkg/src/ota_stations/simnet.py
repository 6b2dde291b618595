"""Deterministic discrete-event network: links with bandwidth/latency
profiles, store-and-forward transfers with max-min fair sharing, timers,
and a request/reply layer with bounded retransmission.

One world is strictly single-threaded; identical (scenario, seed) pairs
produce identical event traces.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

CELLULAR = "cellular"
ENGINE_CABLE = "engine_cable"
STATION_WIRE = "station_wire"
IN_VEHICLE = "in_vehicle"


@dataclass(frozen=True)
class LinkProfile:
    bandwidth_bps: float
    latency_ms: float
    cls: str = CELLULAR

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")


class _Flow:
    __slots__ = ("remaining_bits", "rate_bps", "last_t", "gen", "on_done")

    def __init__(self, size_bits: float, now: float, on_done: Callable):
        self.remaining_bits = float(size_bits)
        self.rate_bps = 0.0
        self.last_t = now
        self.gen = 0
        self.on_done = on_done


class Link:
    """A contended channel; concurrent flows share bandwidth equally and
    rates are recomputed at every flow start/finish."""

    def __init__(self, name: str, profile: LinkProfile):
        self.name = name
        self.profile = profile
        self._flows: list = []

    def start_flow(self, world: "World", size_bytes: int, on_done: Callable):
        flow = _Flow(size_bytes * 8, world.now, on_done)
        self._flows.append(flow)
        self._rebalance(world)

    def _rebalance(self, world: "World"):
        if not self._flows:
            return
        rate = self.profile.bandwidth_bps / len(self._flows)
        for flow in self._flows:
            elapsed_s = (world.now - flow.last_t) / 1000.0
            flow.remaining_bits = max(
                0.0, flow.remaining_bits - flow.rate_bps * elapsed_s)
            flow.last_t = world.now
            flow.rate_bps = rate
            flow.gen += 1
            eta_ms = flow.remaining_bits / rate * 1000.0
            world._schedule_raw(world.now + eta_ms,
                               self._finisher(world, flow, flow.gen))

    def _finisher(self, world, flow, gen):
        def fire():
            if flow.gen != gen or flow not in self._flows:
                return
            self._flows.remove(flow)
            self._rebalance(world)
            flow.on_done()
        return fire


class Timer:
    __slots__ = ("cancelled", "fired")

    def __init__(self):
        self.cancelled = False
        self.fired = False

    def cancel(self):
        self.cancelled = True


@dataclass
class Envelope:
    src: str
    dst: str
    kind: str
    payload: object
    size: int
    link: Link
    req_id: Optional[int] = None
    reply_to: Optional[int] = None
    attempt: int = 0


@dataclass(frozen=True)
class TraceRecord:
    time: float
    src: str
    dst: str
    size: int
    link_cls: str
    kind: str


class World:
    """Event loop, clock, actor registry, and delivery trace."""

    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self.seed = seed
        self._heap: list = []
        self._seq = 0
        self._req_seq = 0
        self.actors: dict = {}
        self.trace: list = []
        self.adversary = None
        self.request_timeout_ms: Optional[float] = None
        self.request_retries: int = 3
        self.horizon_reached = False

    # -- scheduling --------------------------------------------------------

    def _schedule_raw(self, at: float, fn: Callable):
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, fn))

    def schedule(self, delay_ms: float, fn: Callable) -> Timer:
        timer = Timer()

        def fire():
            if not timer.cancelled:
                timer.fired = True
                fn()

        self._schedule_raw(self.now + delay_ms, fire)
        return timer

    def add_actor(self, actor: "Actor"):
        if actor.name in self.actors:
            raise ValueError(f"duplicate actor {actor.name}")
        self.actors[actor.name] = actor

    def next_req_id(self) -> int:
        self._req_seq += 1
        return self._req_seq

    # -- message transport -------------------------------------------------

    def send(self, env: Envelope):
        if self.adversary is not None:
            for action, value in self.adversary.intercept(self, env):
                if action == "drop":
                    return
                if action == "delay":
                    delayed = env
                    self.schedule(value, lambda e=delayed: self._transmit(e))
                    return
                if action == "modify":
                    env = value
                if action == "inject":
                    for extra in value:
                        self._transmit(extra)
        self._transmit(env)

    def _transmit(self, env: Envelope):
        latency = env.link.profile.latency_ms
        if env.size <= 0:
            self.schedule(latency, lambda: self._deliver(env))
        else:
            env.link.start_flow(
                self, env.size,
                lambda: self.schedule(latency, lambda: self._deliver(env)))

    def _deliver(self, env: Envelope):
        self.trace.append(TraceRecord(self.now, env.src, env.dst, env.size,
                                      env.link.profile.cls, env.kind))
        actor = self.actors.get(env.dst)
        if actor is not None:
            actor.receive(env)

    # -- main loop ---------------------------------------------------------

    def run(self, horizon_ms: Optional[float] = None):
        """Process events in (time, seq) order until quiescent or horizon.

        A reached horizon with live timers is reported via `horizon_reached`,
        not an exception.
        """
        while self._heap:
            at, _, fn = heapq.heappop(self._heap)
            if horizon_ms is not None and at > horizon_ms:
                self.horizon_reached = True
                self.now = horizon_ms
                break
            self.now = at
            fn()
        return self.trace

    def trace_csv_rows(self):
        for rec in self.trace:
            yield (f"{rec.time:.6f}", rec.src, rec.dst, str(rec.size),
                   rec.link_cls, rec.kind)


@dataclass
class _Pending:
    on_reply: Callable
    on_fail: Optional[Callable]
    timer: Optional[Timer]
    retries_left: int
    resend: Callable


class Actor:
    """Single-threaded protocol actor; one state transition per event."""

    def __init__(self, name: str, world: World):
        self.name = name
        self.world = world
        self._pending: dict = {}
        self._served: dict = {}
        world.add_actor(self)

    # -- dispatch ----------------------------------------------------------

    def receive(self, env: Envelope):
        if env.reply_to is not None:
            pending = self._pending.pop(env.reply_to, None)
            if pending is None:
                return  # late duplicate reply
            if pending.timer is not None:
                pending.timer.cancel()
            pending.on_reply(env)
            return
        if env.req_id is not None and env.req_id in self._served:
            # Retransmitted request: replay the stored reply verbatim.
            self.world.send(self._served[env.req_id])
            return
        handler = getattr(self, "on_" + env.kind, None)
        if handler is not None:
            handler(env)

    # -- sending -----------------------------------------------------------

    def send(self, dst: str, kind: str, payload, size: int, link: Link):
        self.world.send(Envelope(self.name, dst, kind, payload, size, link))

    def request(self, dst: str, kind: str, payload, size: int, link: Link,
                on_reply: Callable, on_fail: Optional[Callable] = None,
                timeout_ms: Optional[float] = None,
                retries: Optional[int] = None):
        req_id = self.world.next_req_id()
        timeout = timeout_ms if timeout_ms is not None \
            else self.world.request_timeout_ms
        budget = retries if retries is not None else self.world.request_retries
        state = {"left": budget, "attempt": 0}

        def attempt():
            timer = None
            if timeout is not None:
                timer = self.world.schedule(timeout, timed_out)
            self._pending[req_id] = _Pending(on_reply, on_fail, timer,
                                             state["left"], attempt)
            self.world.send(Envelope(self.name, dst, kind, payload, size,
                                     link, req_id=req_id,
                                     attempt=state["attempt"]))
            state["attempt"] += 1

        def timed_out():
            pending = self._pending.pop(req_id, None)
            if pending is None:
                return
            if state["left"] > 0:
                state["left"] -= 1
                attempt()
            elif on_fail is not None:
                on_fail()

        attempt()
        return req_id

    def reply(self, env: Envelope, kind: str, payload, size: int,
              link: Optional[Link] = None):
        out = Envelope(self.name, env.src, kind, payload, size,
                       link or env.link, reply_to=env.req_id)
        if env.req_id is not None:
            self._served[env.req_id] = out
        self.world.send(out)
