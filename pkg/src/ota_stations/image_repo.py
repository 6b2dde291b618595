"""Image repository actor: versioned image/manifest storage, credential
checks on download, whole-image and bucket-range serving.

Locations have the form "<repo_id>/<software>/<version>".  Download
authorization accepts either a producer-signed manifest naming the location
(director-side validation fetches) or a bundle whose grant chain, rooted at
the publish role, reaches the requester.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import messages as msg
from .crypto import KeyRegistry, RevocationList, digest
from .simnet import Actor, Envelope, World


class RepoError(Exception):
    pass


@dataclass
class RepoEntry:
    location: str
    image: msg.UpdateImage
    manifest: msg.UpdateManifest


def location_for(repo_id: str, software: str, version: int) -> str:
    return f"{repo_id}/{software}/{version}"


class ImageRepo(Actor):
    def __init__(self, name: str, world: World, registry: KeyRegistry,
                 publish_id: str, producer_ids: set,
                 crl_ref):
        super().__init__(name, world)
        self.registry = registry
        self.publish_id = publish_id
        self.producer_ids = set(producer_ids)
        self.crl_ref = crl_ref  # callable returning the current CRL
        self.entries: dict = {}  # location -> RepoEntry

    # -- storage -----------------------------------------------------------

    def store(self, image: msg.UpdateImage, manifest: msg.UpdateManifest,
              producer: str) -> str:
        """Step-1 ingestion; prior versions are retained."""
        pd = msg.payload_digest(manifest)
        if not msg.assert_auth(manifest.sigma, {producer}, pd,
                               self.registry, self.crl_ref()):
            raise RepoError("manifest not signed by the claimed producer")
        if digest(image.data) != manifest.theta.h:
            raise RepoError("image digest does not match manifest")
        self.entries[manifest.l] = RepoEntry(manifest.l, image, manifest)
        return manifest.l

    def dump(self):
        """Content-addressed inspection listing, deterministic order."""
        return sorted((e.location, len(e.image.data), e.manifest.tau.v)
                      for e in self.entries.values())

    # -- authorization -----------------------------------------------------

    def _authorized(self, credential, location: str, requester: str) -> bool:
        crl = self.crl_ref()
        if isinstance(credential, msg.UpdateManifest):
            if credential.l != location:
                return False
            pd = msg.payload_digest(credential)
            return msg.assert_auth(credential.sigma,
                                   self.producer_ids & _signers(credential),
                                   pd, self.registry, crl) \
                and bool(self.producer_ids & _signers(credential))
        if isinstance(credential, msg.Bundle):
            if not any(m.l == location for m in credential.manifests):
                return False
            return msg.verify_grant_chain(credential, requester,
                                          self.publish_id, self.registry, crl)
        return False

    # -- message handlers --------------------------------------------------

    def on_store_image(self, env: Envelope):
        try:
            location = self.store(env.payload["image"],
                                  env.payload["manifest"],
                                  env.payload["producer"])
            self.reply(env, "store_ok", {"l": location}, 64)
        except RepoError as exc:
            self.reply(env, "store_err", {"reason": str(exc)}, 64)

    def on_fetch(self, env: Envelope):
        location = env.payload["l"]
        from_index = env.payload.get("from_index", 0)
        credential = env.payload.get("credential")
        if not self._authorized(credential, location, env.src):
            self.reply(env, "fetch_err", {"reason": "unauthorized",
                                          "l": location}, 64)
            return
        entry = self.entries.get(location)
        if entry is None:
            self.reply(env, "fetch_err", {"reason": "not_found",
                                          "l": location}, 64)
            return
        buckets = entry.image.buckets()
        out = buckets[from_index:]
        payload = {"l": location, "buckets": out, "total": len(buckets),
                   "bucket_size": entry.image.bucket_size}
        size = sum(len(chunk) for _, chunk, _ in out) + 64
        self.reply(env, "fetch_ok", payload, size)


def _signers(manifest: msg.UpdateManifest) -> set:
    return {e.signer_id for e in manifest.sigma}
