"""Signing and hashing providers, role key registry, and revocation list.

Every protocol message carries a list of (signer_id, signature) entries over
the digest of its canonically encoded payload.  Two providers are available:
a deterministic HMAC-based one for simulation/tests (signatures are
reproducible from the seed and verification uses the registered key material
directly, so it offers no real asymmetry) and an Ed25519 one backed by the
`cryptography` package for realistic key handling.  Simulation results must
not depend on which provider is plugged in.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field

DIGEST_LEN = 32


def digest(data: bytes) -> bytes:
    """32-byte content digest used everywhere a hash appears on the wire."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class SignatureEntry:
    signer_id: str
    sig: bytes


@dataclass(frozen=True)
class KeyPair:
    signer_id: str
    public_key: bytes
    private_key: bytes
    scheme: str = "hmac"


class CryptoError(Exception):
    pass


class HmacProvider:
    """Deterministic keyed-hash provider for simulation runs.

    Key material doubles as the "public" key, so anyone holding the registry
    could forge signatures; forgery in the simulator is modeled explicitly by
    the adversary instead.  Not for production use.
    """

    scheme = "hmac"

    def generate(self, signer_id: str, seed: bytes) -> KeyPair:
        secret = hashlib.sha256(b"key:" + seed + signer_id.encode()).digest()
        return KeyPair(signer_id, secret, secret, self.scheme)

    def sign(self, payload_digest: bytes, key: KeyPair) -> SignatureEntry:
        sig = hmac.new(key.private_key, payload_digest, hashlib.sha256).digest()
        return SignatureEntry(key.signer_id, sig)

    def verify(self, payload_digest: bytes, public_key: bytes, sig: bytes) -> bool:
        want = hmac.new(public_key, payload_digest, hashlib.sha256).digest()
        return hmac.compare_digest(want, sig)


class Ed25519Provider:
    """Asymmetric provider; private keys never leave the KeyPair."""

    scheme = "ed25519"

    def generate(self, signer_id: str, seed: bytes) -> KeyPair:
        from cryptography.hazmat.primitives.asymmetric import ed25519

        raw = hashlib.sha256(b"key:" + seed + signer_id.encode()).digest()
        priv = ed25519.Ed25519PrivateKey.from_private_bytes(raw)
        pub = priv.public_key().public_bytes_raw()
        return KeyPair(signer_id, pub, raw, self.scheme)

    def sign(self, payload_digest: bytes, key: KeyPair) -> SignatureEntry:
        from cryptography.hazmat.primitives.asymmetric import ed25519

        priv = ed25519.Ed25519PrivateKey.from_private_bytes(key.private_key)
        return SignatureEntry(key.signer_id, priv.sign(payload_digest))

    def verify(self, payload_digest: bytes, public_key: bytes, sig: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric import ed25519

        pub = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
        try:
            pub.verify(sig, payload_digest)
            return True
        except InvalidSignature:
            return False


PROVIDERS = {"hmac": HmacProvider(), "ed25519": Ed25519Provider()}


def sign(payload_digest: bytes, key: KeyPair) -> SignatureEntry:
    if not key.private_key:
        raise CryptoError(f"no private key for {key.signer_id}")
    return PROVIDERS[key.scheme].sign(payload_digest, key)


@dataclass(frozen=True)
class RevocationList:
    revoked: frozenset = frozenset()
    version: int = 0


def revoke(crl: RevocationList, signer_id: str) -> RevocationList:
    # Idempotent on the set; the version still advances so observers can
    # order CRL states.
    return RevocationList(crl.revoked | {signer_id}, crl.version + 1)


@dataclass
class KeyRegistry:
    """Public keys by signer id; private halves stay with the owning actor."""

    keys: dict = field(default_factory=dict)  # signer_id -> (public_key, scheme)

    def add(self, key: KeyPair) -> None:
        if key.signer_id in self.keys:
            raise CryptoError(f"duplicate signer_id {key.signer_id}")
        self.keys[key.signer_id] = (key.public_key, key.scheme)

    def public_of(self, signer_id: str):
        return self.keys.get(signer_id)


def verify(payload_digest: bytes, entry: SignatureEntry,
           registry: KeyRegistry, crl: RevocationList) -> bool:
    """True iff entry verifies under the registered key and is not revoked.

    Unknown signers verify false rather than raising.
    """
    if entry.signer_id in crl.revoked:
        return False
    rec = registry.public_of(entry.signer_id)
    if rec is None:
        return False
    public_key, scheme = rec
    return PROVIDERS[scheme].verify(payload_digest, public_key, entry.sig)
