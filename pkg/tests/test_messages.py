import struct

import pytest
from hypothesis import given, settings, strategies as st

from ota_stations import messages as msg
from ota_stations.crypto import (PROVIDERS, KeyRegistry, RevocationList,
                                 digest)

HMAC = PROVIDERS["hmac"]


def _key(name):
    return HMAC.generate(name, b"test-seed")


def _registry(*keys):
    registry = KeyRegistry()
    for key in keys:
        registry.add(key)
    return registry


# ---------------------------------------------------------------------------
# Canonical encoding: hand-built byte oracle
# ---------------------------------------------------------------------------

def _u64(n):
    return struct.pack(">Q", n)


def _blob(b):
    return struct.pack(">I", len(b)) + b


def _s(text):
    return _blob(text.encode())


def test_timestamp_encoding_matches_hand_built_bytes():
    ts = msg.TimestampRecord(t=123, v=7)
    expected = bytes([0x01]) + _u64(123) + _u64(7)
    assert msg.canonical_encode(ts) == expected


def test_meta_encoding_matches_hand_built_bytes():
    h = digest(b"image")
    theta = msg.MetaRecord(h, "ecu1", "sw0", ("dep0", "dep1"))
    expected = (bytes([0x02]) + _blob(h) + _s("ecu1") + _s("sw0")
                + struct.pack(">I", 2) + _s("dep0") + _s("dep1"))
    assert msg.canonical_encode(theta) == expected


def test_manifest_encoding_matches_hand_built_bytes():
    h = digest(b"image")
    theta = msg.MetaRecord(h, "e", "s")
    mu = msg.UpdateManifest("repo0/s/2", theta, msg.TimestampRecord(2, 2))
    expected = (bytes([0x03]) + _s("repo0/s/2")
                + _blob(h) + _s("e") + _s("s") + struct.pack(">I", 0)
                + _u64(2) + _u64(2)
                + struct.pack(">I", 0))  # empty signature section
    assert msg.canonical_encode(mu) == expected


def test_signature_section_outside_signed_region():
    theta = msg.MetaRecord(digest(b"image"), "e", "s")
    mu = msg.UpdateManifest("repo0/s/2", theta, msg.TimestampRecord(2, 2))
    signed = msg.sign_message(mu, _key("producer0"))
    assert msg.signed_region(mu) == msg.signed_region(signed)
    assert msg.payload_digest(mu) == msg.payload_digest(signed)
    assert msg.canonical_encode(mu) != msg.canonical_encode(signed)


def test_grants_and_endorsements_outside_signed_region():
    mu = _manifest("s")
    bundle = msg.Bundle((mu,), msg.TimestampRecord(5, 1))
    granted = msg.grant_bundle(bundle, "engine0", _key("sud.publish"))
    endorsed = msg.endorse_for_ecu(granted, "ecu1", _key("sud.targets"))
    assert msg.payload_digest(bundle) == msg.payload_digest(endorsed)


# ---------------------------------------------------------------------------
# Round-trips
# ---------------------------------------------------------------------------

def _manifest(software, version=2, ecu="e", deps=()):
    theta = msg.MetaRecord(digest(software.encode()), ecu, software,
                           tuple(deps))
    return msg.UpdateManifest(f"repo0/{software}/{version}", theta,
                              msg.TimestampRecord(version, version))


names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_.-",
                min_size=1, max_size=12)


@st.composite
def timestamps(draw):
    return msg.TimestampRecord(draw(st.integers(0, 2**40)),
                               draw(st.integers(1, 2**20)))


@st.composite
def metas(draw):
    s = draw(names)
    deps = draw(st.lists(names.filter(lambda n: n != s), max_size=4,
                         unique=True))
    return msg.MetaRecord(draw(st.binary(min_size=32, max_size=32)),
                          draw(names), s, tuple(deps))


@st.composite
def sigmas(draw):
    entries = draw(st.lists(
        st.tuples(names, st.binary(min_size=1, max_size=64)), max_size=3))
    from ota_stations.crypto import SignatureEntry
    return tuple(SignatureEntry(n, b) for n, b in entries)


@st.composite
def manifests(draw):
    return msg.UpdateManifest(draw(names), draw(metas()), draw(timestamps()),
                              draw(sigmas()))


@st.composite
def bundles(draw):
    ms = draw(st.lists(manifests(), min_size=1, max_size=4))
    keys = {(m.theta.s, m.tau.v) for m in ms}
    if len(keys) != len(ms):
        ms = list({(m.theta.s, m.tau.v): m for m in ms}.values())
    grants = tuple(msg.Grant(draw(names), e) for e in draw(sigmas()))
    ecu_sigs = tuple((draw(names), e) for e in draw(sigmas()))
    return msg.Bundle(tuple(ms), draw(timestamps()), draw(sigmas()),
                      grants, ecu_sigs)


@st.composite
def status_reports(draw):
    if draw(st.booleans()):
        r = draw(st.binary(min_size=32, max_size=32))
    else:
        entries = []
        for _ in range(draw(st.integers(0, 3))):
            sig = draw(sigmas())
            entries.append(msg.StatusEntry(draw(names), draw(names),
                                           draw(timestamps()),
                                           sig[0] if sig else None))
        r = tuple(entries)
    bs = tuple(draw(st.lists(bundles(), max_size=2)))
    return msg.StatusReport(r, draw(timestamps()),
                            draw(st.binary(min_size=16, max_size=16)),
                            draw(sigmas()), bs)


@settings(max_examples=150, deadline=None)
@given(st.one_of(timestamps(), metas(), manifests(), bundles(),
                 status_reports()))
def test_encoding_round_trip(message):
    encoded = msg.canonical_encode(message)
    assert msg.decode_message(encoded) == message


@settings(max_examples=100, deadline=None)
@given(manifests(), manifests())
def test_encoding_injective(a, b):
    if a != b:
        assert msg.canonical_encode(a) != msg.canonical_encode(b)


def test_encoding_rejects_malformed_values():
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.TimestampRecord(1, 0))   # version < 1
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.MetaRecord(b"short", "e", "s"))
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.MetaRecord(digest(b"x"), "e", "s",
                                            ("s",)))      # self-dependency
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.MetaRecord(digest(b"x"), "e", "s",
                                            ("a", "a")))  # duplicate dep
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.Bundle((), msg.TimestampRecord(1, 1)))
    mu = _manifest("s")
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.Bundle((mu, mu), msg.TimestampRecord(1, 1)))
    with pytest.raises(msg.EncodingError):
        msg.canonical_encode(msg.StatusReport((), msg.TimestampRecord(1, 1),
                                              b"shortnonce"))
    with pytest.raises(msg.EncodingError):
        msg.decode_message(msg.canonical_encode(_manifest("s")) + b"\x00")


# ---------------------------------------------------------------------------
# Signing, grants, endorsements
# ---------------------------------------------------------------------------

def test_assert_auth_requires_every_signer():
    mu = _manifest("s")
    alice, bob = _key("alice"), _key("bob")
    registry = _registry(alice, bob)
    mu = msg.sign_message(mu, alice)
    pd = msg.payload_digest(mu)
    crl = RevocationList()
    assert msg.assert_auth(mu.sigma, {"alice"}, pd, registry, crl)
    assert not msg.assert_auth(mu.sigma, {"alice", "bob"}, pd, registry, crl)
    mu = msg.sign_message(mu, bob)
    assert msg.assert_auth(mu.sigma, {"alice", "bob"}, pd, registry, crl)


def test_grant_chain_root_and_delegation():
    publish, engine, station = (_key("sud.publish"), _key("engine0"),
                                _key("station0"))
    registry = _registry(publish, engine, station)
    crl = RevocationList()
    bundle = msg.Bundle((_manifest("s"),), msg.TimestampRecord(5, 1))

    to_engine = msg.grant_bundle(bundle, "engine0", publish)
    assert msg.verify_grant_chain(to_engine, "engine0", "sud.publish",
                                  registry, crl)
    assert not msg.verify_grant_chain(to_engine, "station0", "sud.publish",
                                      registry, crl)

    delegated = msg.grant_bundle(to_engine, "station0", engine)
    assert msg.verify_grant_chain(delegated, "station0", "sud.publish",
                                  registry, crl)

    # A chain not rooted at the publish role is rejected.
    rogue = msg.grant_bundle(bundle, "station0", engine)
    assert not msg.verify_grant_chain(rogue, "station0", "sud.publish",
                                      registry, crl)
    # A link signed by the wrong predecessor is rejected.
    skipped = msg.grant_bundle(to_engine, "station0", publish)
    assert not msg.verify_grant_chain(skipped, "station0", "sud.publish",
                                      registry, crl)


def test_grant_chain_respects_revocation():
    publish, engine = _key("sud.publish"), _key("engine0")
    registry = _registry(publish, engine)
    bundle = msg.Bundle((_manifest("s"),), msg.TimestampRecord(5, 1))
    granted = msg.grant_bundle(
        msg.grant_bundle(bundle, "engine0", publish), "station0", engine)
    assert msg.verify_grant_chain(granted, "station0", "sud.publish",
                                  registry, RevocationList())
    from ota_stations.crypto import revoke
    crl = revoke(RevocationList(), "engine0")
    assert not msg.verify_grant_chain(granted, "station0", "sud.publish",
                                      registry, crl)


def test_ecu_endorsement_bound_to_ecu():
    targets = _key("sud.targets")
    registry = _registry(targets)
    crl = RevocationList()
    bundle = msg.Bundle((_manifest("s"),), msg.TimestampRecord(5, 1))
    endorsed = msg.endorse_for_ecu(bundle, "ecu1", targets)
    assert msg.verify_ecu_endorsement(endorsed, "ecu1", "sud.targets",
                                      registry, crl)
    assert not msg.verify_ecu_endorsement(endorsed, "ecu2", "sud.targets",
                                          registry, crl)


# ---------------------------------------------------------------------------
# Freshness rules
# ---------------------------------------------------------------------------

def test_freshness_rules_truth_table():
    ts = msg.TimestampRecord
    assert msg.assert_fresh(ts(2, 2), ts(1, 1))
    assert not msg.assert_fresh(ts(2, 1), ts(1, 1))   # version not newer
    assert not msg.assert_fresh(ts(1, 2), ts(1, 1))   # time not newer

    # Vehicle status as seen by the director: never version-ahead.
    assert msg.assert_status_fresh_at_sud(ts(2, 1), ts(1, 1))
    assert msg.assert_status_fresh_at_sud(ts(2, 1), ts(1, 2))
    assert not msg.assert_status_fresh_at_sud(ts(2, 3), ts(1, 2))
    assert not msg.assert_status_fresh_at_sud(ts(1, 1), ts(1, 1))

    # Director reply as seen by the vehicle: version gaps tolerated.
    assert msg.assert_status_fresh_at_primary(ts(2, 5), ts(1, 2))
    assert msg.assert_status_fresh_at_primary(ts(2, 2), ts(1, 2))
    assert not msg.assert_status_fresh_at_primary(ts(2, 1), ts(1, 2))
    assert not msg.assert_status_fresh_at_primary(ts(1, 3), ts(1, 2))


def test_assert_integrity():
    data = b"image-bytes"
    theta = msg.MetaRecord(digest(data), "e", "s")
    mu = msg.UpdateManifest("repo0/s/2", theta, msg.TimestampRecord(2, 2))
    assert msg.assert_integrity(mu, data, "e", "s")
    assert not msg.assert_integrity(mu, data + b"x", "e", "s")
    assert not msg.assert_integrity(mu, data, "other", "s")
    assert not msg.assert_integrity(mu, data, "e", "other")


# ---------------------------------------------------------------------------
# Bucketed downloads
# ---------------------------------------------------------------------------

def test_split_buckets_concatenation_identity():
    data = bytes(range(256)) * 5
    buckets = msg.split_buckets(data, 100)
    assert b"".join(chunk for _, chunk, _ in buckets) == data
    assert [i for i, _, _ in buckets] == list(range(len(buckets)))


def test_assemble_resume_and_complete():
    data = b"x" * 250
    theta = msg.MetaRecord(digest(data), "e", "s")
    mu = msg.UpdateManifest("l", theta, msg.TimestampRecord(2, 2))
    buckets = msg.split_buckets(data, 100)

    partial = msg.assemble_buckets(buckets[:2], mu, total=3, bucket_size=100)
    assert partial == msg.Resume(2)
    hole = msg.assemble_buckets([buckets[0], buckets[2]], mu, total=3,
                                bucket_size=100)
    assert hole == msg.Resume(1)
    done = msg.assemble_buckets(buckets, mu, total=3, bucket_size=100)
    assert isinstance(done, msg.Complete)
    assert done.image.data == data


def test_assemble_detects_corruption():
    data = b"x" * 250
    theta = msg.MetaRecord(digest(data), "e", "s")
    mu = msg.UpdateManifest("l", theta, msg.TimestampRecord(2, 2))
    buckets = msg.split_buckets(data, 100)
    index, chunk, chunk_digest = buckets[1]
    with pytest.raises(msg.IntegrityError):
        msg.assemble_buckets([buckets[0], (index, b"EVIL" + chunk[4:],
                                           chunk_digest)], mu,
                             total=3, bucket_size=100)
    # All buckets present but the whole-image digest disagrees.
    other = msg.split_buckets(b"y" * 250, 100)
    with pytest.raises(msg.IntegrityError):
        msg.assemble_buckets(other, mu, total=3, bucket_size=100)


def test_status_entry_signing():
    key = _key("VIN.ecu1")
    registry = _registry(key)
    entry = msg.sign_status_entry(
        msg.StatusEntry("ecu1", "sw0", msg.TimestampRecord(1, 1)), key)
    from ota_stations.crypto import verify
    assert verify(msg.status_entry_digest(entry), entry.sig, registry,
                  RevocationList())
