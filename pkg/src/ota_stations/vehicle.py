"""Vehicle-side actors: the primary ECU (status reporting, reply
validation, station/cellular download with bucket resume, install
orchestration) and secondary ECUs (partial verification when the primary
is trusted, full verification plus own liveness timers when it is not).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import messages as msg
from .crypto import KeyPair, KeyRegistry, digest, sign, verify
from .simnet import Actor, Envelope, Link, World

PRIMARY_ECU = "primary"
FETCH_ATTEMPTS = 6


def group_digest(items) -> bytes:
    """Digest binding an all-or-nothing install group: (manifest, image
    bytes) pairs destined to one ECU."""
    acc = b"group"
    for mu, data in items:
        acc += msg.payload_digest(mu) + digest(data)
    return digest(acc)


def _install_log(world: World) -> list:
    if not hasattr(world, "install_log"):
        world.install_log = []
    return world.install_log


@dataclass
class PendingItem:
    mu: msg.UpdateManifest
    bundle: msg.Bundle
    data: Optional[bytes] = None
    installed: bool = False
    via_cellular: bool = False
    buckets: list = field(default_factory=list)
    attempts: int = 0


class VehiclePrimary(Actor):
    """Primary ECU; the actor name is the VIN."""

    def __init__(self, vin: str, world: World, registry: KeyRegistry,
                 key: KeyPair, crl_ref, sud: str, sud_link: Link,
                 repo: str, repo_link: Link, sud_roles: dict,
                 publish_id: str, producer_ids: set,
                 initial: dict, secondaries: dict,
                 station: Optional[str] = None,
                 station_link: Optional[Link] = None,
                 untrusted: bool = False,
                 flash_latency_ms: float = 50.0,
                 status_deadline_ms: Optional[float] = None,
                 image_deadline_ms: Optional[float] = None,
                 ignition_period_ms: Optional[float] = None,
                 ignition_limit: Optional[int] = None,
                 cellular_updates=frozenset(),
                 bucket_size: int = msg.DEFAULT_BUCKET_SIZE):
        super().__init__(vin, world)
        self.vin = vin
        self.registry = registry
        self.key = key
        self.crl_ref = crl_ref
        self.sud = sud
        self.sud_link = sud_link
        self.repo = repo
        self.repo_link = repo_link
        self.sud_roles = sud_roles
        self.publish_id = publish_id
        self.producer_ids = set(producer_ids)
        self.secondaries = dict(secondaries)   # ecu -> (actor name, Link)
        self.station = station
        self.station_link = station_link
        self.untrusted = untrusted
        self.flash_latency_ms = flash_latency_ms
        self.status_deadline_ms = status_deadline_ms
        self.image_deadline_ms = image_deadline_ms
        self.ignition_period_ms = ignition_period_ms
        self.ignition_limit = ignition_limit
        self.cellular_updates = set(cellular_updates)
        self.bucket_size = bucket_size

        # inventory: (ecu, software) -> TimestampRecord; installed images of
        # the primary itself additionally keep their digest.
        self.inventory: dict = {}
        self.installed: dict = {}              # s -> (tau, digest), primary ECU
        for s, (ecu, tau) in initial.items():
            self.inventory[(ecu, s)] = tau

        self.last_reply_tau = msg.TimestampRecord(0, 1)
        self.seen_reply_nonces: set = set()
        self.last_full_entries: Optional[tuple] = None
        self.last_r_digest: Optional[bytes] = None
        self.bundle_tau: dict = {}             # trigger s -> TimestampRecord
        self.pending: dict = {}                # (s, v) -> PendingItem
        self._station_queue: list = []
        self._station_busy = False
        self._session_ok = False
        self._fallback_used = False
        self._status_timer = None
        self._image_timer = None
        self._last_status_t = 0
        self._ignitions = 0
        self.alert_flag = False
        self.alerts: list = []
        self.outcomes: list = []               # (time, outcome, software)
        self.records: dict = {"ignitions": [], "manifest_done": None,
                              "complete": None}

    # -- alerts ------------------------------------------------------------

    def alert(self, reason: str):
        self.alert_flag = True
        self.alerts.append((self.world.now, reason))

    # -- status cycle (step 6 onward) --------------------------------------

    def ignition(self):
        if self.ignition_limit is not None \
                and self._ignitions >= self.ignition_limit:
            return
        self._ignitions += 1
        self.records["ignitions"].append(self.world.now)
        if self.ignition_period_ms is not None:
            self.world.schedule(self.ignition_period_ms, self.ignition)
        if self.untrusted and self.secondaries:
            self._gather_secondary_entries()
        else:
            self._send_status(self._own_entries())

    def _own_entries(self) -> tuple:
        entries = []
        for (ecu, s), tau in self.inventory.items():
            entry = msg.StatusEntry(ecu, s, tau)
            if self.untrusted:
                entry = msg.sign_status_entry(entry, self.key)
            entries.append(entry)
        return tuple(sorted(entries, key=lambda e: (e.ecu, e.software)))

    def _gather_secondary_entries(self):
        collected = [msg.sign_status_entry(msg.StatusEntry(PRIMARY_ECU, s, tau),
                                           self.key)
                     for (ecu, s), tau in self.inventory.items()
                     if ecu == PRIMARY_ECU]
        waiting = {"n": len(self.secondaries)}

        def one_done(reply: Optional[Envelope]):
            if reply is not None and reply.kind == "report_tau_ok":
                collected.extend(reply.payload["entries"])
            waiting["n"] -= 1
            if waiting["n"] == 0:
                entries = tuple(sorted(
                    collected, key=lambda e: (e.ecu, e.software)))
                self._send_status(entries)

        for ecu in sorted(self.secondaries):
            name, link = self.secondaries[ecu]
            self.request(name, "report_tau", {}, 64, link,
                         on_reply=one_done,
                         on_fail=lambda: one_done(None),
                         timeout_ms=1000.0, retries=0)

    def _send_status(self, entries: tuple, force_full: bool = False):
        use_digest = (not force_full and self.last_r_digest is not None
                      and entries == self.last_full_entries)
        r = self.last_r_digest if use_digest else entries
        t = max(int(self.world.now) + 1, self._last_status_t + 1)
        self._last_status_t = t
        tau = msg.TimestampRecord(t, self.last_reply_tau.v)
        nonce = self.world.rng.randbytes(msg.NONCE_LEN)
        gamma = msg.StatusReport(r, tau, nonce)
        gamma = msg.sign_message(gamma, self.key)
        sent_digest = None if use_digest else digest(msg.signed_region(gamma))
        expect_nonce = digest(b"echo" + nonce)[:msg.NONCE_LEN]
        self._arm_status_deadline()
        self.request(self.sud, "status", gamma, msg.wire_size(gamma),
                     self.sud_link,
                     on_reply=lambda rep: self._on_status_reply(
                         rep, entries, sent_digest, expect_nonce))

    def _arm_status_deadline(self):
        if self.status_deadline_ms is None:
            return
        if self._status_timer is not None:
            self._status_timer.cancel()
        self._status_timer = self.world.schedule(
            self.status_deadline_ms, lambda: self.alert("status_timeout"))

    def _on_status_reply(self, env: Envelope, entries, sent_digest,
                         expect_nonce):
        if env.kind == "status_need_full":
            self._send_status(entries, force_full=True)
            return
        if env.kind != "status_reply":
            return
        gamma = env.payload
        if not isinstance(gamma, msg.StatusReport):
            return
        crl = self.crl_ref()
        if not msg.assert_auth(gamma.sigma, {self.sud_roles["timestamp"]},
                               msg.payload_digest(gamma), self.registry, crl):
            return  # leave the deadline armed
        if not msg.assert_status_fresh_at_primary(gamma.tau,
                                                  self.last_reply_tau):
            return
        if gamma.nonce != expect_nonce \
                or gamma.nonce in self.seen_reply_nonces:
            return
        self.seen_reply_nonces.add(gamma.nonce)
        self.last_reply_tau = gamma.tau
        if self._status_timer is not None:
            self._status_timer.cancel()
            self._status_timer = None
        if sent_digest is not None:
            self.last_full_entries = entries
            self.last_r_digest = sent_digest

        fresh = []
        for bundle in gamma.bundles:
            if not self._validate_bundle(bundle):
                continue
            trigger = bundle.manifests[0].theta.s
            self.bundle_tau[trigger] = bundle.tau
            for mu in bundle.manifests:
                if self._wanted(mu):
                    fresh.append((mu, bundle))
        self._relay_to_secondaries(gamma)
        if self.records["manifest_done"] is None and (fresh or gamma.bundles):
            self.records["manifest_done"] = self.world.now
        if fresh:
            for mu, bundle in fresh:
                self.pending[(mu.theta.s, mu.tau.v)] = PendingItem(mu, bundle)
            self._arm_image_deadline()
            self._start_downloads()

    def _wanted(self, mu: msg.UpdateManifest) -> bool:
        key = (mu.theta.s, mu.tau.v)
        if key in self.pending:
            return False
        have = self.inventory.get((mu.theta.e, mu.theta.s))
        return have is None or mu.tau.v > have.v

    def _validate_bundle(self, bundle: msg.Bundle) -> bool:
        crl = self.crl_ref()
        if not msg.verify_grant_chain(bundle, self.vin, self.publish_id,
                                      self.registry, crl):
            return False
        pd = msg.payload_digest(bundle)
        if not msg.assert_auth(bundle.sigma, {self.sud_roles["snapshot"]},
                               pd, self.registry, crl):
            return False
        trigger = bundle.manifests[0].theta.s
        last = self.bundle_tau.get(trigger)
        if last is not None and bundle.tau.v <= last.v:
            return False
        for mu in bundle.manifests:
            if not self._manifest_valid(mu):
                return False
        return True

    def _manifest_valid(self, mu: msg.UpdateManifest) -> bool:
        crl = self.crl_ref()
        pd = msg.payload_digest(mu)
        signers = {e.signer_id for e in mu.sigma}
        producers = signers & self.producer_ids
        if not producers:
            return False
        required = producers | {self.sud_roles["targets"],
                                self.sud_roles["timestamp"],
                                self.sud_roles["root"]}
        if not msg.assert_auth(mu.sigma, required, pd, self.registry, crl):
            return False
        have = self.inventory.get((mu.theta.e, mu.theta.s))
        if have is not None and mu.tau.v < have.v:
            return False  # never regress an ECU
        return True

    def _relay_to_secondaries(self, gamma: msg.StatusReport):
        if not self.untrusted:
            return
        for ecu in sorted(self.secondaries):
            name, link = self.secondaries[ecu]
            self.send(name, "relay_reply", {"report": gamma},
                      msg.wire_size(gamma), link)

    # -- downloads (steps 8-9) ---------------------------------------------

    def _start_downloads(self):
        for key in sorted(self.pending):
            item = self.pending[key]
            if item.data is not None or item.buckets or item.installed:
                continue
            software = item.mu.theta.s
            if (self.station is None or software in self.cellular_updates
                    or item.via_cellular):
                item.via_cellular = True
                self._cellular_fetch(item)
            else:
                self._station_queue.append(item)
        if self._station_queue and not self._station_busy:
            self._open_session()

    def _open_session(self):
        self._station_busy = True
        if self._session_ok:
            self._serve_next()
            return
        nonce = self.world.rng.randbytes(msg.NONCE_LEN)
        self.request(self.station, "session_open", {"nonce": nonce}, 96,
                     self.station_link,
                     on_reply=lambda r: self._on_session(r, nonce),
                     on_fail=lambda: self._session_failed())

    def _on_session(self, env: Envelope, nonce: bytes):
        ok = (env.kind == "session_ok"
              and verify(digest(b"station-auth" + nonce),
                         env.payload["station_sig"], self.registry,
                         self.crl_ref()))
        if not ok:
            self._session_failed()
            return
        self._session_ok = True
        self._serve_next()

    def _session_failed(self):
        # Revoked or unreachable station: everything queued goes cellular.
        self._station_busy = False
        queue, self._station_queue = self._station_queue, []
        for item in queue:
            item.via_cellular = True
            self._cellular_fetch(item)

    def _serve_next(self):
        if not self._station_queue:
            self._station_busy = False
            return
        item = self._station_queue[0]
        from_index = self._next_missing(item)
        payload = {"manifest": item.mu, "bundle": item.bundle,
                   "min": self.vin[:11], "from_index": from_index,
                   "bucket_size": self.bucket_size}
        self.request(self.station, "serve", payload,
                     96 + msg.wire_size(item.bundle), self.station_link,
                     on_reply=lambda r: self._on_station_bytes(item, r),
                     on_fail=lambda: self._station_item_failed(item))

    def _on_station_bytes(self, item: PendingItem, env: Envelope):
        if item.installed or item.data is not None:
            # The image deadline already rerouted this item; stale reply.
            if item in self._station_queue:
                self._station_queue.remove(item)
            self._serve_next()
            return
        if env.kind != "serve_ok":
            self._station_item_failed(item)
            return
        self.outcomes.append((self.world.now, env.payload.get("outcome"),
                              item.mu.theta.s))
        done = self._absorb_buckets(item, env.payload)
        if done is None:
            self._station_item_failed(item)
            return
        if done:
            if item in self._station_queue:
                self._station_queue.remove(item)
            self._image_complete(item)
        self._serve_next()

    def _station_item_failed(self, item: PendingItem):
        if item in self._station_queue:
            self._station_queue.remove(item)
        item.via_cellular = True
        item.buckets, item.attempts = [], 0
        self._cellular_fetch(item)
        self._serve_next()

    def _cellular_fetch(self, item: PendingItem):
        from_index = self._next_missing(item)
        payload = {"l": item.mu.l, "credential": item.bundle,
                   "from_index": from_index}
        self.request(self.repo, "fetch", payload,
                     96 + msg.wire_size(item.bundle), self.repo_link,
                     on_reply=lambda r: self._on_cellular_bytes(item, r))

    def _on_cellular_bytes(self, item: PendingItem, env: Envelope):
        if item.installed or item.data is not None:
            return  # already satisfied by another source
        if env.kind != "fetch_ok":
            return  # image deadline handles the alert
        done = self._absorb_buckets(item, env.payload)
        if done is None:
            return
        if done:
            self._image_complete(item)
        elif item.attempts < FETCH_ATTEMPTS:
            item.attempts += 1
            self._cellular_fetch(item)

    def _next_missing(self, item: PendingItem) -> int:
        have = {index for index, _, _ in item.buckets}
        i = 0
        while i in have:
            i += 1
        return i

    def _absorb_buckets(self, item: PendingItem, payload) -> Optional[bool]:
        """Returns True on a verified complete image, False to keep pulling,
        None when the retry budget for this source is exhausted."""
        for bucket in payload["buckets"]:
            index, chunk, chunk_digest = bucket
            if digest(chunk) == chunk_digest:
                item.buckets.append(bucket)
        try:
            result = msg.assemble_buckets(item.buckets, item.mu,
                                          total=payload["total"],
                                          bucket_size=payload["bucket_size"])
        except msg.IntegrityError:
            item.buckets = []
            result = msg.Resume(0)
        if isinstance(result, msg.Complete):
            item.data = result.image.data
            return True
        item.attempts += 1
        if item.attempts > FETCH_ATTEMPTS:
            return None
        return False

    # -- install push (step 10) --------------------------------------------

    def _image_complete(self, item: PendingItem):
        ecu = item.mu.theta.e
        group = [p for p in self.pending.values()
                 if p.bundle is item.bundle and p.mu.theta.e == ecu]
        if any(p.data is None for p in group):
            return
        items = tuple(sorted(((p.mu, p.data) for p in group),
                             key=lambda pair: pair[0].theta.s))
        if ecu == PRIMARY_ECU:
            self.world.schedule(self.flash_latency_ms,
                                lambda: self._install_local(group))
        else:
            self._push_group(ecu, item.bundle, items, group)

    def _install_local(self, group):
        for p in group:
            self.installed[p.mu.theta.s] = (p.mu.tau, digest(p.data))
            self.inventory[(PRIMARY_ECU, p.mu.theta.s)] = p.mu.tau
            _install_log(self.world).append(
                (self.world.now, self.vin, PRIMARY_ECU, p.mu.theta.s,
                 p.mu.tau.v, digest(p.data)))
            p.installed = True
        self._check_complete()

    def _push_group(self, ecu, bundle, items, group):
        name, link = self.secondaries[ecu]
        entry = sign(group_digest(items), self.key)
        size = sum(len(data) for _, data in items) + 256
        self.request(name, "install_group",
                     {"bundle": bundle, "items": items, "group_sig": entry},
                     size, link,
                     on_reply=lambda r: self._on_install_reply(ecu, group, r))

    def _on_install_reply(self, ecu, group, env: Envelope):
        if env.kind != "install_ok":
            return  # secondary's own deadline raises the alert if needed
        for p in group:
            self.inventory[(ecu, p.mu.theta.s)] = p.mu.tau
            p.installed = True
        self._check_complete()

    def _check_complete(self):
        if all(p.installed for p in self.pending.values()):
            self.records["complete"] = self.world.now
            if self._image_timer is not None:
                self._image_timer.cancel()
                self._image_timer = None

    # -- deadlines ---------------------------------------------------------

    def _arm_image_deadline(self):
        if self.image_deadline_ms is None:
            return
        if self._image_timer is not None:
            self._image_timer.cancel()
        self._image_timer = self.world.schedule(self.image_deadline_ms,
                                                self._image_deadline_fired)

    def _image_deadline_fired(self):
        stuck = [p for p in self.pending.values() if not p.installed]
        if not stuck:
            return
        if not self._fallback_used:
            # One cellular retry round before declaring failure.
            self._fallback_used = True
            self._station_queue, self._station_busy = [], False
            for item in stuck:
                if item.data is None:
                    item.via_cellular = True
                    item.buckets, item.attempts = [], 0
                    self._cellular_fetch(item)
            self._arm_image_deadline()
            return
        self.alert("image_timeout")

    # -- inspection --------------------------------------------------------

    def dump(self) -> str:
        lines = [f"vin {self.vin} alert {int(self.alert_flag)}"]
        for (ecu, s) in sorted(self.inventory):
            tau = self.inventory[(ecu, s)]
            lines.append(f"{ecu} {s} v{tau.v} t{tau.t}")
        return "\n".join(lines) + "\n"


class SecondaryEcu(Actor):
    """Secondary ECU; the actor name is '<vin>.<ecu>'."""

    def __init__(self, vin: str, ecu: str, world: World,
                 registry: KeyRegistry, key: KeyPair, crl_ref,
                 sud_roles: dict, publish_id: str, producer_ids: set,
                 initial: dict, untrusted: bool = False,
                 flash_latency_ms: float = 50.0,
                 status_deadline_ms: Optional[float] = None,
                 image_deadline_ms: Optional[float] = None):
        super().__init__(f"{vin}.{ecu}", world)
        self.vin = vin
        self.ecu = ecu
        self.registry = registry
        self.key = key
        self.crl_ref = crl_ref
        self.sud_roles = sud_roles
        self.publish_id = publish_id
        self.producer_ids = set(producer_ids)
        self.untrusted = untrusted
        self.flash_latency_ms = flash_latency_ms
        self.status_deadline_ms = status_deadline_ms
        self.image_deadline_ms = image_deadline_ms
        self.installed: dict = dict(initial)   # s -> (tau, digest or None)
        self.primary_id = f"{vin}.primary"
        self.last_reply_tau = msg.TimestampRecord(0, 1)
        self._status_timer = None
        self._image_timer = None
        self.alert_flag = False
        self.alerts: list = []

    def alert(self, reason: str):
        self.alert_flag = True
        self.alerts.append((self.world.now, reason))

    # -- status relay ------------------------------------------------------

    def on_report_tau(self, env: Envelope):
        entries = []
        for s in sorted(self.installed):
            tau, _ = self.installed[s]
            entry = msg.StatusEntry(self.ecu, s, tau)
            if self.untrusted:
                entry = msg.sign_status_entry(entry, self.key)
            entries.append(entry)
        if self.untrusted and self.status_deadline_ms is not None:
            if self._status_timer is not None:
                self._status_timer.cancel()
            self._status_timer = self.world.schedule(
                self.status_deadline_ms,
                lambda: self.alert("status_relay_timeout"))
        self.reply(env, "report_tau_ok", {"entries": tuple(entries)}, 128)

    def on_relay_reply(self, env: Envelope):
        gamma = env.payload.get("report")
        if not isinstance(gamma, msg.StatusReport):
            return
        if self.untrusted:
            ok = msg.assert_auth(gamma.sigma, {self.sud_roles["timestamp"]},
                                 msg.payload_digest(gamma), self.registry,
                                 self.crl_ref())
            if not ok:
                return
        if not msg.assert_status_fresh_at_primary(gamma.tau,
                                                  self.last_reply_tau):
            return
        self.last_reply_tau = gamma.tau
        if self._status_timer is not None:
            self._status_timer.cancel()
            self._status_timer = None
        if self._expects_updates(gamma) and self.image_deadline_ms is not None:
            if self._image_timer is not None:
                self._image_timer.cancel()
            self._image_timer = self.world.schedule(
                self.image_deadline_ms,
                lambda: self.alert("install_timeout"))

    def _expects_updates(self, gamma: msg.StatusReport) -> bool:
        for bundle in gamma.bundles:
            for mu in bundle.manifests:
                if mu.theta.e != self.ecu:
                    continue
                have = self.installed.get(mu.theta.s)
                if have is None or mu.tau.v > have[0].v:
                    return True
        return False

    # -- install (step 10) -------------------------------------------------

    def on_install_group(self, env: Envelope):
        bundle = env.payload["bundle"]
        items = env.payload["items"]
        entry = env.payload["group_sig"]
        reason = self._validate_group(bundle, items, entry)
        if reason is not None:
            self.reply(env, "install_err", {"reason": reason}, 64)
            return
        self.world.schedule(self.flash_latency_ms,
                            lambda: self._flash(env, items))

    def _validate_group(self, bundle, items, entry) -> Optional[str]:
        crl = self.crl_ref()
        if entry.signer_id != self.primary_id \
                or not verify(group_digest(items), entry, self.registry, crl):
            return "primary_auth"
        if not items:
            return "empty"
        if self.untrusted:
            reason = self._full_verification(bundle, items)
            if reason is not None:
                return reason
        for mu, data in items:
            if mu.theta.e != self.ecu:
                return "wrong_ecu"
            if digest(data) != mu.theta.h:
                return "integrity"
            have = self.installed.get(mu.theta.s)
            if have is not None and mu.tau.v <= have[0].v:
                return "stale"
        return None

    def _full_verification(self, bundle, items) -> Optional[str]:
        crl = self.crl_ref()
        if not isinstance(bundle, msg.Bundle):
            return "no_bundle"
        pd = msg.payload_digest(bundle)
        if not msg.assert_auth(bundle.sigma, {self.sud_roles["snapshot"]},
                               pd, self.registry, crl):
            return "bundle_auth"
        if not msg.verify_ecu_endorsement(bundle, self.ecu,
                                          self.sud_roles["targets"],
                                          self.registry, crl):
            return "no_endorsement"
        enclosed = {msg.payload_digest(m) for m in bundle.manifests}
        for mu, _ in items:
            if msg.payload_digest(mu) not in enclosed:
                return "not_in_bundle"
            signers = {e.signer_id for e in mu.sigma}
            producers = signers & self.producer_ids
            required = producers | {self.sud_roles["targets"],
                                    self.sud_roles["timestamp"],
                                    self.sud_roles["root"]}
            if not producers or not msg.assert_auth(
                    mu.sigma, required, msg.payload_digest(mu),
                    self.registry, crl):
                return "manifest_auth"
        return None

    def _flash(self, env: Envelope, items):
        for mu, data in items:
            self.installed[mu.theta.s] = (mu.tau, digest(data))
            _install_log(self.world).append(
                (self.world.now, self.vin, self.ecu, mu.theta.s,
                 mu.tau.v, digest(data)))
        if self._image_timer is not None:
            self._image_timer.cancel()
            self._image_timer = None
        self.reply(env, "install_ok",
                   {"ecu": self.ecu,
                    "software": tuple(sorted(mu.theta.s for mu, _ in items))},
                   128)

    def dump(self) -> str:
        lines = [f"ecu {self.vin}.{self.ecu} alert {int(self.alert_flag)}"]
        for s in sorted(self.installed):
            tau, _ = self.installed[s]
            lines.append(f"{s} v{tau.v} t{tau.t}")
        return "\n".join(lines) + "\n"
