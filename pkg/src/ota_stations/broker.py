"""Update distribution broker: the update engine (subscription management,
bundle validation, download authorization) and the update stations
(LRU-cached image serving with hit/miss/unknown outcomes).

Non-hit downloads flow station <- image repository over the station cable
after the engine issues a delegated download grant; the engine itself is
control-plane only.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from . import messages as msg
from .crypto import KeyPair, KeyRegistry, digest, sign
from .simnet import Actor, Envelope, Link, World


@dataclass
class CacheEntry:
    data: bytes
    manifest: msg.UpdateManifest
    size: int


class UpdateEngine(Actor):
    def __init__(self, name: str, world: World, registry: KeyRegistry,
                 key: KeyPair, crl_ref, sud: str, sud_link: Link,
                 publish_id: str, producer_ids: set, sud_roles: dict):
        super().__init__(name, world)
        self.registry = registry
        self.key = key
        self.crl_ref = crl_ref
        self.sud = sud
        self.sud_link = sud_link
        self.publish_id = publish_id
        self.producer_ids = set(producer_ids)
        self.sud_roles = sud_roles        # role name -> signer id
        self.subscriptions: dict = {}     # min -> {station: Link}
        self.bundles: dict = {}           # (min, trigger) -> validated Bundle
        self.last_bundle_tau: dict = {}   # (min, trigger) -> TimestampRecord
        self.last_manifest_tau: dict = {} # s -> TimestampRecord
        self.audit_log: list = []

    # -- validation (step 5) ----------------------------------------------

    def validate_bundle(self, bundle: msg.Bundle, min_id: str):
        """Returns None if valid, else a rejection reason."""
        crl = self.crl_ref()
        if not msg.verify_grant_chain(bundle, self.name, self.publish_id,
                                      self.registry, crl):
            return "auth"
        pd = msg.payload_digest(bundle)
        if not msg.assert_auth(bundle.sigma, {self.sud_roles["snapshot"]},
                               pd, self.registry, crl):
            return "auth"
        trigger = bundle.manifests[0].theta.s
        last = self.last_bundle_tau.get((min_id, trigger))
        if last is not None and not msg.assert_fresh(bundle.tau, last):
            return "stale"
        for mu in bundle.manifests:
            if not self._manifest_valid(mu):
                return f"manifest:{mu.theta.s}"
        return None

    def _manifest_valid(self, mu: msg.UpdateManifest) -> bool:
        crl = self.crl_ref()
        pd = msg.payload_digest(mu)
        signers = {e.signer_id for e in mu.sigma}
        if not (signers & self.producer_ids):
            return False
        required = (signers & self.producer_ids) | {
            self.sud_roles["targets"], self.sud_roles["timestamp"],
            self.sud_roles["root"]}
        if not msg.assert_auth(mu.sigma, required, pd, self.registry, crl):
            return False
        last = self.last_manifest_tau.get(mu.theta.s)
        if last is not None and mu.tau.v < last.v:
            return False
        return True

    def _accept(self, bundle: msg.Bundle, min_id: str):
        trigger = bundle.manifests[0].theta.s
        self.bundles[(min_id, trigger)] = bundle
        self.last_bundle_tau[(min_id, trigger)] = bundle.tau
        for mu in bundle.manifests:
            prev = self.last_manifest_tau.get(mu.theta.s)
            if prev is None or mu.tau.v > prev.v:
                self.last_manifest_tau[mu.theta.s] = mu.tau
        for station, link in sorted(
                self.subscriptions.get(min_id, {}).items()):
            self._push_to_station(bundle, min_id, station, link)

    def _push_to_station(self, bundle, min_id, station, link):
        copy = msg.grant_bundle(bundle, station, self.key)
        self.send(station, "prefetch", {"bundle": copy, "min": min_id},
                  msg.wire_size(copy), link)

    def delegate(self, bundle: msg.Bundle, station: str) -> msg.Bundle:
        return msg.grant_bundle(bundle, station, self.key)

    # -- handlers ----------------------------------------------------------

    def on_publish(self, env: Envelope):
        bundle = env.payload["bundle"]
        min_id = env.payload["min"]
        reason = self.validate_bundle(bundle, min_id)
        if reason is None:
            self._accept(bundle, min_id)
            return
        self.audit_log.append(("publish_rejected", min_id, reason))
        if reason == "stale":
            return  # replayed bundle: discard outright
        trigger = bundle.manifests[0].theta.s if bundle.manifests else None
        self.request(
            self.sud, "manifest_fix", {"min": min_id, "s": trigger}, 96,
            self.sud_link,
            on_reply=lambda r: self._on_fix(r, min_id))

    def _on_fix(self, reply: Envelope, min_id: str):
        if reply.kind != "manifest_fix_ok":
            return
        bundle = reply.payload["bundle"]
        if self.validate_bundle(bundle, min_id) is None:
            self._accept(bundle, min_id)

    def on_authorize(self, env: Envelope):
        min_id = env.payload["min"]
        software = env.payload["s"]
        for (m, trigger), bundle in sorted(self.bundles.items()):
            if m != min_id:
                continue
            if any(mu.theta.s == software for mu in bundle.manifests):
                self.reply(env, "authorize_ok",
                           {"bundle": self.delegate(bundle, env.src)},
                           msg.wire_size(bundle) + 64)
                return
        self.reply(env, "authorize_err", {"reason": "unknown"}, 64)

    def on_subscribe_model(self, env: Envelope):
        min_id = env.payload["min"]
        station = env.src
        known = min_id in self.subscriptions or any(
            m == min_id for m, _ in self.bundles)
        self.subscriptions.setdefault(min_id, {})[station] = env.link
        if known:
            self._reply_subscription(env, min_id)
            return
        # First sight of this model anywhere: subscribe upstream first.
        self.request(self.sud, "subscribe", {"min": min_id}, 96,
                     self.sud_link,
                     on_reply=lambda r: self._on_sud_subscribed(env, min_id, r),
                     on_fail=lambda: self.reply(env, "subscribe_model_ok",
                                                {"min": min_id}, 64))

    def _on_sud_subscribed(self, station_env: Envelope, min_id: str,
                           reply: Envelope):
        if reply.kind == "subscribe_ok":
            for bundle in reply.payload["bundles"]:
                if self.validate_bundle(bundle, min_id) is None:
                    self._accept(bundle, min_id)
        self._reply_subscription(station_env, min_id)

    def _reply_subscription(self, env: Envelope, min_id: str):
        self.reply(env, "subscribe_model_ok", {"min": min_id}, 64)

    def revoke_station(self, station: str):
        found = False
        for stations in self.subscriptions.values():
            if station in stations:
                del stations[station]
                found = True
        self.audit_log.append(("revoke_station", station, found))


class Station(Actor):
    def __init__(self, name: str, world: World, registry: KeyRegistry,
                 key: KeyPair, crl_ref, engine: str, engine_link: Link,
                 repo: str, repo_link: Link, publish_id: str,
                 sud_roles: dict, producer_ids: set,
                 capacity_bytes: int):
        super().__init__(name, world)
        self.registry = registry
        self.key = key
        self.crl_ref = crl_ref
        self.engine = engine
        self.engine_link = engine_link
        self.repo = repo
        self.repo_link = repo_link
        self.publish_id = publish_id
        self.sud_roles = sud_roles
        self.producer_ids = set(producer_ids)
        self.capacity = capacity_bytes
        self.cache: OrderedDict = OrderedDict()  # (s, v) -> CacheEntry
        self.occupancy = 0
        self.known_models: set = set()
        self.unknown_updates: set = set()  # software ids treated as first-seen
        self.events: list = []             # (time, outcome, software)

    # -- cache -------------------------------------------------------------

    def cache_insert(self, software: str, version: int, data: bytes,
                     manifest: msg.UpdateManifest):
        """LRU insert; returns the list of evicted software ids.  Images
        larger than the whole cache are served pass-through, uncached."""
        size = len(data)
        if size > self.capacity:
            return None
        evicted = []
        while self.occupancy + size > self.capacity and self.cache:
            (old_s, old_v), old = self.cache.popitem(last=False)
            self.occupancy -= old.size
            evicted.append(old_s)
        self.cache[(software, version)] = CacheEntry(data, manifest, size)
        self.occupancy += size
        return evicted

    def cache_get(self, software: str, version: int):
        entry = self.cache.get((software, version))
        if entry is not None:
            self.cache.move_to_end((software, version))
        return entry

    def cache_dump(self):
        return sorted((s, v, e.size) for (s, v), e in self.cache.items())

    # -- prefetch (publishing step 5 tail) ---------------------------------

    def on_prefetch(self, env: Envelope):
        bundle = env.payload["bundle"]
        min_id = env.payload["min"]
        if not msg.verify_grant_chain(bundle, self.name, self.publish_id,
                                      self.registry, self.crl_ref()):
            return
        self.known_models.add(min_id)
        for mu in bundle.manifests:
            if (mu.theta.s, mu.tau.v) not in self.cache:
                self._fetch_image(mu, bundle, on_done=None)

    def _fetch_image(self, mu, credential, on_done, from_index: int = 0,
                     received=None, attempts: int = 0):
        received = received or []
        self.request(
            self.repo, "fetch",
            {"l": mu.l, "credential": credential, "from_index": from_index},
            96 + msg.wire_size(credential), self.repo_link,
            on_reply=lambda r: self._on_image_bytes(
                mu, credential, on_done, received, attempts, r),
            on_fail=lambda: on_done(None) if on_done else None)

    def _on_image_bytes(self, mu, credential, on_done, received,
                        attempts, reply: Envelope):
        if reply.kind != "fetch_ok":
            if on_done:
                on_done(None)
            return
        total = reply.payload["total"]
        bucket_size = reply.payload["bucket_size"]
        for bucket in reply.payload["buckets"]:
            index, chunk, chunk_digest = bucket
            if digest(chunk) == chunk_digest:
                received.append(bucket)
        try:
            result = msg.assemble_buckets(received, mu, total=total,
                                          bucket_size=bucket_size)
        except msg.IntegrityError:
            received, result = [], msg.Resume(0)
        if isinstance(result, msg.Complete):
            self.cache_insert(mu.theta.s, mu.tau.v, result.image.data, mu)
            if on_done:
                on_done(result.image.data)
            return
        if attempts >= 8:
            if on_done:
                on_done(None)
            return
        self._fetch_image(mu, credential, on_done, result.next_index,
                          received, attempts + 1)

    # -- vehicle-facing session (step 9) -----------------------------------

    def on_session_open(self, env: Envelope):
        nonce = env.payload["nonce"]
        entry = sign(digest(b"station-auth" + nonce), self.key)
        self.reply(env, "session_ok", {"station": self.name,
                                       "station_sig": entry}, 128)

    def on_serve(self, env: Envelope):
        mu = env.payload["manifest"]
        bundle = env.payload["bundle"]
        min_id = env.payload["min"]
        from_index = env.payload.get("from_index", 0)
        if not self._vehicle_request_valid(mu, bundle, env.src):
            self.reply(env, "serve_err", {"reason": "refused"}, 64)
            return
        cached = self.cache_get(mu.theta.s, mu.tau.v)
        if cached is not None:
            self._serve_bytes(env, mu, cached.data, from_index, "hit")
            return
        if min_id in self.known_models and mu.theta.s not in self.unknown_updates:
            self._miss_path(env, mu, min_id, from_index, "miss")
            return
        # Unknown vehicle model: subscribe before pulling.
        self.request(self.engine, "subscribe_model", {"min": min_id}, 96,
                     self.engine_link,
                     on_reply=lambda r: self._after_subscribe(
                         env, mu, min_id, from_index),
                     on_fail=lambda: self.reply(env, "serve_err",
                                                {"reason": "engine"}, 64))

    def _after_subscribe(self, env, mu, min_id, from_index):
        self.known_models.add(min_id)
        self.unknown_updates.discard(mu.theta.s)
        self._miss_path(env, mu, min_id, from_index, "unknown")

    def _miss_path(self, env, mu, min_id, from_index, outcome):
        self.request(
            self.engine, "authorize",
            {"min": min_id, "s": mu.theta.s, "v": mu.tau.v}, 96,
            self.engine_link,
            on_reply=lambda r: self._on_authorized(env, mu, from_index,
                                                   outcome, r),
            on_fail=lambda: self.reply(env, "serve_err",
                                       {"reason": "engine"}, 64))

    def _on_authorized(self, env, mu, from_index, outcome, reply: Envelope):
        if reply.kind != "authorize_ok":
            self.reply(env, "serve_err", {"reason": "unauthorized"}, 64)
            return
        credential = reply.payload["bundle"]
        self._fetch_image(
            mu, credential,
            on_done=lambda data: self._serve_bytes(env, mu, data, from_index,
                                                   outcome)
            if data is not None
            else self.reply(env, "serve_err", {"reason": "fetch"}, 64))

    def _vehicle_request_valid(self, mu, bundle, requester: str) -> bool:
        crl = self.crl_ref()
        if not msg.verify_grant_chain(bundle, requester, self.publish_id,
                                      self.registry, crl):
            return False
        pd = msg.payload_digest(bundle)
        if not msg.assert_auth(bundle.sigma, {self.sud_roles["snapshot"]},
                               pd, self.registry, crl):
            return False
        if not any(msg.payload_digest(m) == msg.payload_digest(mu)
                   for m in bundle.manifests):
            return False
        pd_mu = msg.payload_digest(mu)
        required = {self.sud_roles["targets"], self.sud_roles["timestamp"],
                    self.sud_roles["root"]}
        return msg.assert_auth(mu.sigma, required, pd_mu, self.registry, crl)

    def _serve_bytes(self, env, mu, data: bytes, from_index: int,
                     outcome: str):
        self.events.append((self.world.now, outcome, mu.theta.s))
        bucket_size = msg.DEFAULT_BUCKET_SIZE
        if env.payload.get("bucket_size"):
            bucket_size = env.payload["bucket_size"]
        buckets = msg.split_buckets(data, bucket_size)
        out = buckets[from_index:]
        size = sum(len(chunk) for _, chunk, _ in out) + 64
        self.reply(env, "serve_ok",
                   {"buckets": out, "total": len(buckets),
                    "bucket_size": bucket_size, "outcome": outcome}, size)
