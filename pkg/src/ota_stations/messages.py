"""Protocol message algebra: metadata records, manifests, bundles, status
reports, update images, canonical byte encoding, and validation assertions.

Canonical encoding rules: fields in declaration order, integers as 8-byte
big-endian, strings UTF-8 with 4-byte big-endian length prefix, byte strings
with 4-byte length prefix, lists as 4-byte count then elements.  Signature
entries, download grants, and per-ECU endorsements are appended AFTER the
signed region, so adding them never changes the digest other parties verify.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Union

from .crypto import (DIGEST_LEN, KeyPair, KeyRegistry, RevocationList,
                     SignatureEntry, digest, sign, verify)

NONCE_LEN = 16
DEFAULT_BUCKET_SIZE = 1 << 20

TAG_TS = 0x01
TAG_META = 0x02
TAG_MANIFEST = 0x03
TAG_BUNDLE = 0x04
TAG_STATUS = 0x05


class EncodingError(Exception):
    pass


class IntegrityError(Exception):
    pass


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimestampRecord:
    t: int  # milliseconds since simulation epoch
    v: int  # version counter, >= 1


@dataclass(frozen=True)
class MetaRecord:
    h: bytes               # digest of the update image
    e: str                 # target ECU
    s: str                 # software id
    d: tuple = ()          # ordered dependency list, software ids


@dataclass(frozen=True)
class UpdateManifest:
    l: str                 # location URI: "<repo_id>/<path>"
    theta: MetaRecord
    tau: TimestampRecord
    sigma: tuple = ()      # SignatureEntry list, append-only


@dataclass(frozen=True)
class Grant:
    """Download-eligibility link: `entry` signs the bundle region bound to
    `subject`.  The first grant is signed by the publish role; later grants
    chain from the previous subject (the engine vouching for a station)."""

    subject: str
    entry: SignatureEntry


@dataclass(frozen=True)
class Bundle:
    manifests: tuple       # UpdateManifest, ordered, pairwise distinct (s, v)
    tau: TimestampRecord
    sigma: tuple = ()
    grants: tuple = ()     # Grant chain, outside the signed region
    ecu_sigs: tuple = ()   # (ecu_id, SignatureEntry), outside the signed region


@dataclass(frozen=True)
class StatusEntry:
    ecu: str
    software: str
    tau: TimestampRecord
    sig: Optional[SignatureEntry] = None  # present when secondaries are untrusted


@dataclass(frozen=True)
class StatusReport:
    r: Union[tuple, bytes]  # tuple of StatusEntry, or digest of a prior full R
    tau: TimestampRecord
    nonce: bytes            # 16 bytes, unique per message per sender
    sigma: tuple = ()
    bundles: tuple = ()     # present only in director replies


@dataclass(frozen=True)
class UpdateImage:
    s: str
    data: bytes
    bucket_size: int = DEFAULT_BUCKET_SIZE

    def buckets(self):
        return split_buckets(self.data, self.bucket_size)


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------

def _u64(n: int) -> bytes:
    if n < 0:
        raise EncodingError("negative integer")
    return struct.pack(">Q", n)


def _blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _s(s: str) -> bytes:
    return _blob(s.encode("utf-8"))


def _count(n: int) -> bytes:
    return struct.pack(">I", n)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u64(self) -> int:
        (n,) = struct.unpack_from(">Q", self.data, self.pos)
        self.pos += 8
        return n

    def u32(self) -> int:
        (n,) = struct.unpack_from(">I", self.data, self.pos)
        self.pos += 4
        return n

    def blob(self) -> bytes:
        n = self.u32()
        out = self.data[self.pos:self.pos + n]
        if len(out) != n:
            raise EncodingError("truncated blob")
        self.pos += n
        return out

    def s(self) -> str:
        return self.blob().decode("utf-8")

    def byte(self) -> int:
        b = self.data[self.pos]
        self.pos += 1
        return b

    def done(self) -> bool:
        return self.pos == len(self.data)


def _check_ts(ts: TimestampRecord) -> None:
    if ts.v < 1 or ts.t < 0:
        raise EncodingError(f"bad timestamp record {ts}")


def _check_meta(m: MetaRecord) -> None:
    if len(m.h) != DIGEST_LEN:
        raise EncodingError("digest length must be 32")
    if len(set(m.d)) != len(m.d) or m.s in m.d:
        raise EncodingError("dependency list malformed")


def _enc_ts(ts: TimestampRecord) -> bytes:
    _check_ts(ts)
    return _u64(ts.t) + _u64(ts.v)


def _dec_ts(r: _Reader) -> TimestampRecord:
    return TimestampRecord(r.u64(), r.u64())


def _enc_meta(m: MetaRecord) -> bytes:
    _check_meta(m)
    out = _blob(m.h) + _s(m.e) + _s(m.s) + _count(len(m.d))
    for dep in m.d:
        out += _s(dep)
    return out


def _dec_meta(r: _Reader) -> MetaRecord:
    h = r.blob()
    e = r.s()
    s = r.s()
    d = tuple(r.s() for _ in range(r.u32()))
    return MetaRecord(h, e, s, d)


def _enc_sig(entry: SignatureEntry) -> bytes:
    return _s(entry.signer_id) + _blob(entry.sig)


def _dec_sig(r: _Reader) -> SignatureEntry:
    return SignatureEntry(r.s(), r.blob())


def _enc_sigma(sigma: tuple) -> bytes:
    out = _count(len(sigma))
    for entry in sigma:
        out += _enc_sig(entry)
    return out


def _dec_sigma(r: _Reader) -> tuple:
    return tuple(_dec_sig(r) for _ in range(r.u32()))


def signed_region(msg) -> bytes:
    """Canonical bytes of the signature-covered part of a message."""
    if isinstance(msg, TimestampRecord):
        return bytes([TAG_TS]) + _enc_ts(msg)
    if isinstance(msg, MetaRecord):
        return bytes([TAG_META]) + _enc_meta(msg)
    if isinstance(msg, UpdateManifest):
        return (bytes([TAG_MANIFEST]) + _s(msg.l) + _enc_meta(msg.theta)
                + _enc_ts(msg.tau))
    if isinstance(msg, Bundle):
        if not msg.manifests:
            raise EncodingError("bundle must enclose at least one manifest")
        keys = [(m.theta.s, m.tau.v) for m in msg.manifests]
        if len(set(keys)) != len(keys):
            raise EncodingError("bundle manifests not distinct by (s, v)")
        out = bytes([TAG_BUNDLE]) + _count(len(msg.manifests))
        for m in msg.manifests:
            body = signed_region(m) + _enc_sigma(m.sigma)
            out += _blob(body)
        return out + _enc_ts(msg.tau)
    if isinstance(msg, StatusReport):
        if len(msg.nonce) != NONCE_LEN:
            raise EncodingError("nonce must be 16 bytes")
        out = bytes([TAG_STATUS])
        if isinstance(msg.r, bytes):
            out += b"\x01" + _blob(msg.r)
        else:
            out += b"\x00" + _count(len(msg.r))
            for entry in msg.r:
                out += _s(entry.ecu) + _s(entry.software) + _enc_ts(entry.tau)
                if entry.sig is None:
                    out += b"\x00"
                else:
                    out += b"\x01" + _enc_sig(entry.sig)
        out += _enc_ts(msg.tau) + _blob(msg.nonce)
        out += _count(len(msg.bundles))
        for b in msg.bundles:
            out += _blob(canonical_encode(b))
        return out
    raise EncodingError(f"unencodable message {type(msg).__name__}")


def canonical_encode(msg) -> bytes:
    """Full wire encoding: signed region followed by the signature section."""
    region = signed_region(msg)
    if isinstance(msg, (TimestampRecord, MetaRecord)):
        return region
    if isinstance(msg, UpdateManifest):
        return region + _enc_sigma(msg.sigma)
    if isinstance(msg, Bundle):
        out = region + _enc_sigma(msg.sigma)
        out += _count(len(msg.grants))
        for g in msg.grants:
            out += _s(g.subject) + _enc_sig(g.entry)
        out += _count(len(msg.ecu_sigs))
        for ecu, entry in msg.ecu_sigs:
            out += _s(ecu) + _enc_sig(entry)
        return out
    if isinstance(msg, StatusReport):
        return region + _enc_sigma(msg.sigma)
    raise EncodingError(f"unencodable message {type(msg).__name__}")


def decode_message(data: bytes):
    r = _Reader(data)
    msg = _decode(r)
    if not r.done():
        raise EncodingError("trailing bytes")
    return msg


def _decode(r: _Reader):
    tag = r.byte()
    if tag == TAG_TS:
        return _dec_ts(r)
    if tag == TAG_META:
        return _dec_meta(r)
    if tag == TAG_MANIFEST:
        l = r.s()
        theta = _dec_meta(r)
        tau = _dec_ts(r)
        sigma = _dec_sigma(r)
        return UpdateManifest(l, theta, tau, sigma)
    if tag == TAG_BUNDLE:
        manifests = []
        for _ in range(r.u32()):
            manifests.append(decode_message(r.blob()))
        tau = _dec_ts(r)
        sigma = _dec_sigma(r)
        grants = tuple(Grant(r.s(), _dec_sig(r)) for _ in range(r.u32()))
        ecu_sigs = tuple((r.s(), _dec_sig(r)) for _ in range(r.u32()))
        return Bundle(tuple(manifests), tau, sigma, grants, ecu_sigs)
    if tag == TAG_STATUS:
        variant = r.byte()
        if variant == 1:
            rep = r.blob()
        else:
            entries = []
            for _ in range(r.u32()):
                ecu = r.s()
                software = r.s()
                tau_e = _dec_ts(r)
                sig = _dec_sig(r) if r.byte() else None
                entries.append(StatusEntry(ecu, software, tau_e, sig))
            rep = tuple(entries)
        tau = _dec_ts(r)
        nonce = r.blob()
        bundles = tuple(decode_message(r.blob()) for _ in range(r.u32()))
        sigma = _dec_sigma(r)
        return StatusReport(rep, tau, nonce, sigma, bundles)
    raise EncodingError(f"unknown tag {tag:#x}")


def payload_digest(msg) -> bytes:
    return digest(signed_region(msg))


def wire_size(msg) -> int:
    return len(canonical_encode(msg))


# ---------------------------------------------------------------------------
# Signing helpers
# ---------------------------------------------------------------------------

def sign_message(msg, key: KeyPair):
    """Append the signer's entry; prior entries are never removed."""
    entry = sign(payload_digest(msg), key)
    return replace(msg, sigma=msg.sigma + (entry,))


def _grant_digest(bundle: Bundle, subject: str) -> bytes:
    return digest(signed_region(bundle) + b"\x00sub" + subject.encode())


def grant_bundle(bundle: Bundle, subject: str, key: KeyPair) -> Bundle:
    """Append a download grant for `subject`, signed by `key`."""
    entry = sign(_grant_digest(bundle, subject), key)
    return replace(bundle, grants=bundle.grants + (Grant(subject, entry),))


def verify_grant_chain(bundle: Bundle, requester: str, publish_id: str,
                       registry: KeyRegistry, crl: RevocationList) -> bool:
    """True iff a grant chain rooted at the publish role reaches `requester`.

    Each link must verify over the bundle region bound to its subject, and
    each non-root link must be signed by the previous subject's key.
    """
    expected_signer = publish_id
    reached = False
    for g in bundle.grants:
        if g.entry.signer_id != expected_signer:
            return False
        if not verify(_grant_digest(bundle, g.subject), g.entry, registry, crl):
            return False
        expected_signer = g.subject
        if g.subject == requester:
            reached = True
            break
    return reached


def _ecu_digest(bundle: Bundle, ecu: str) -> bytes:
    return digest(signed_region(bundle) + b"\x00ecu" + ecu.encode())


def endorse_for_ecu(bundle: Bundle, ecu: str, key: KeyPair) -> Bundle:
    entry = sign(_ecu_digest(bundle, ecu), key)
    return replace(bundle, ecu_sigs=bundle.ecu_sigs + ((ecu, entry),))


def verify_ecu_endorsement(bundle: Bundle, ecu: str, required_signer: str,
                           registry: KeyRegistry, crl: RevocationList) -> bool:
    for tagged_ecu, entry in bundle.ecu_sigs:
        if tagged_ecu == ecu and entry.signer_id == required_signer:
            if verify(_ecu_digest(bundle, ecu), entry, registry, crl):
                return True
    return False


def status_entry_digest(entry: StatusEntry) -> bytes:
    return digest(b"\x00tau" + _s(entry.ecu) + _s(entry.software)
                  + _enc_ts(entry.tau))


def sign_status_entry(entry: StatusEntry, key: KeyPair) -> StatusEntry:
    return replace(entry, sig=sign(status_entry_digest(entry), key))


# ---------------------------------------------------------------------------
# Validation assertions
# ---------------------------------------------------------------------------

def assert_auth(sigma: tuple, required: set, payload_digest_: bytes,
                registry: KeyRegistry, crl: RevocationList) -> bool:
    """True iff every required signer has a verifying, non-revoked entry."""
    for signer_id in required:
        ok = any(e.signer_id == signer_id
                 and verify(payload_digest_, e, registry, crl)
                 for e in sigma)
        if not ok:
            return False
    return True


def assert_fresh(new: TimestampRecord, last: TimestampRecord) -> bool:
    """Strictly newer in both time and version (publishing-side rule)."""
    return new.t > last.t and new.v > last.v


def assert_status_fresh_at_sud(new: TimestampRecord,
                               last: TimestampRecord) -> bool:
    """Director-side status freshness: the vehicle must never claim a status
    version newer than the director's own."""
    return new.t > last.t and new.v <= last.v


def assert_status_fresh_at_primary(new: TimestampRecord,
                                   last: TimestampRecord) -> bool:
    """Vehicle-side reply freshness; version gaps are tolerated."""
    return new.t > last.t and new.v >= last.v


def assert_integrity(mu: UpdateManifest, image_bytes: bytes,
                     expected_ecu: str, expected_sw: str) -> bool:
    return (digest(image_bytes) == mu.theta.h
            and mu.theta.e == expected_ecu
            and mu.theta.s == expected_sw)


# ---------------------------------------------------------------------------
# Bucketed downloads
# ---------------------------------------------------------------------------

def split_buckets(data: bytes, bucket_size: int):
    """Fixed-size chunks with per-bucket digests; concatenation is identity."""
    if bucket_size < 1:
        raise ValueError("bucket_size must be >= 1")
    out = []
    for i in range(0, max(len(data), 1), bucket_size):
        chunk = data[i:i + bucket_size]
        out.append((i // bucket_size, chunk, digest(chunk)))
    return out


@dataclass(frozen=True)
class Complete:
    image: UpdateImage


@dataclass(frozen=True)
class Resume:
    next_index: int


def assemble_buckets(buckets_received, mu: UpdateManifest,
                     total: Optional[int] = None,
                     bucket_size: int = DEFAULT_BUCKET_SIZE):
    """Reassemble an image from in-order buckets.

    Returns Complete once every bucket is present and the full-package digest
    matches the manifest; otherwise Resume with the first missing index.
    Raises IntegrityError when all buckets are present but the digest does
    not match (restart from bucket 0).
    """
    by_index = {}
    for index, chunk, chunk_digest in buckets_received:
        if digest(chunk) != chunk_digest:
            raise IntegrityError(f"bucket {index} digest mismatch")
        by_index[index] = chunk
    next_missing = 0
    while next_missing in by_index:
        next_missing += 1
    if total is not None and next_missing < total:
        return Resume(next_missing)
    data = b"".join(by_index[i] for i in range(next_missing))
    if digest(data) == mu.theta.h:
        return Complete(UpdateImage(mu.theta.s, data, bucket_size))
    if total is not None:
        raise IntegrityError("full-package digest mismatch")
    return Resume(next_missing)
