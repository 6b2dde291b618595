"""Shared fixture plumbing: a small hand-wired world with one repository,
one director, and helper constructors for signed artifacts."""
from __future__ import annotations

from ota_stations import messages as msg
from ota_stations.crypto import PROVIDERS, KeyRegistry, RevocationList, digest
from ota_stations.director import Director
from ota_stations.image_repo import ImageRepo, location_for
from ota_stations.simnet import ENGINE_CABLE, Link, LinkProfile, World

HMAC = PROVIDERS["hmac"]
ROLES = ("targets", "snapshot", "timestamp", "root", "publish")
VIN = "MODEL000000000001"


class Rig:
    def __init__(self, seed=1, untrusted=False, co_update_groups=()):
        self.world = World(seed=seed)
        self.registry = KeyRegistry()
        self.keys = {}
        self.crl_box = {"crl": RevocationList()}
        self.crl_ref = lambda: self.crl_box["crl"]
        for name in ("producer0",) + tuple(f"sud.{r}" for r in ROLES):
            self.add_key(name)
        self.role_keys = {r: self.keys[f"sud.{r}"] for r in ROLES}
        self.sud_roles = {r: f"sud.{r}" for r in ROLES}
        self.repo = ImageRepo("repo0", self.world, self.registry,
                              "sud.publish", {"producer0"}, self.crl_ref)
        self.director = Director(
            "sud0", self.world, self.registry, self.role_keys, self.crl_ref,
            repo="repo0", repo_link=self.link("sud-repo"),
            producer_ids={"producer0"}, co_update_groups=co_update_groups,
            untrusted_secondaries=untrusted)

    def add_key(self, name):
        key = HMAC.generate(name, b"rig")
        self.registry.add(key)
        self.keys[name] = key
        return key

    def link(self, tag, mbps=100.0, latency=1.0):
        return Link(tag, LinkProfile(mbps * 1e6, latency, ENGINE_CABLE))

    def make_update(self, software, version=2, ecu="primary", deps=(),
                    size=1000):
        data = bytes((software + str(version)).encode() * 1)[:1] * size
        location = location_for("repo0", software, version)
        theta = msg.MetaRecord(digest(data), ecu, software, tuple(deps))
        mu = msg.UpdateManifest(location, theta,
                                msg.TimestampRecord(version, version))
        mu = msg.sign_message(mu, self.keys["producer0"])
        return mu, msg.UpdateImage(software, data, 65536)

    def seed_update(self, software, version=2, ecu="primary", deps=(),
                    size=1000):
        mu, image = self.make_update(software, version, ecu, deps, size)
        self.repo.store(image, mu, "producer0")
        return self.director.accept_manifest(mu), image
