import pytest

from ota_stations.crypto import (CryptoError, KeyRegistry, PROVIDERS,
                                 RevocationList, digest, revoke, sign,
                                 verify)


@pytest.fixture(params=["hmac", "ed25519"])
def provider(request):
    return PROVIDERS[request.param]


def test_digest_is_32_bytes_and_stable():
    assert len(digest(b"abc")) == 32
    assert digest(b"abc") == digest(b"abc")
    assert digest(b"abc") != digest(b"abd")


def test_sign_verify_roundtrip(provider):
    key = provider.generate("alice", b"seed")
    registry = KeyRegistry()
    registry.add(key)
    entry = sign(digest(b"payload"), key)
    assert entry.signer_id == "alice"
    assert verify(digest(b"payload"), entry, registry, RevocationList())
    assert not verify(digest(b"other"), entry, registry, RevocationList())


def test_unknown_signer_verifies_false():
    key = PROVIDERS["hmac"].generate("alice", b"seed")
    entry = sign(digest(b"payload"), key)
    assert not verify(digest(b"payload"), entry, KeyRegistry(),
                      RevocationList())


def test_revoked_signer_verifies_false(provider):
    key = provider.generate("alice", b"seed")
    registry = KeyRegistry()
    registry.add(key)
    entry = sign(digest(b"payload"), key)
    crl = revoke(RevocationList(), "alice")
    assert not verify(digest(b"payload"), entry, registry, crl)
    # Other signers are unaffected.
    other = provider.generate("bob", b"seed")
    registry.add(other)
    entry2 = sign(digest(b"payload"), other)
    assert verify(digest(b"payload"), entry2, registry, crl)


def test_revoke_is_idempotent_on_set_but_advances_version():
    crl = RevocationList()
    crl1 = revoke(crl, "alice")
    crl2 = revoke(crl1, "alice")
    assert crl1.revoked == crl2.revoked == frozenset({"alice"})
    assert crl2.version == crl1.version + 1 == 2


def test_duplicate_registration_rejected():
    registry = KeyRegistry()
    key = PROVIDERS["hmac"].generate("alice", b"seed")
    registry.add(key)
    with pytest.raises(CryptoError):
        registry.add(key)


def test_signing_without_private_key_rejected():
    from ota_stations.crypto import KeyPair
    key = KeyPair("alice", b"pub", b"", "hmac")
    with pytest.raises(CryptoError):
        sign(digest(b"x"), key)


def test_key_generation_deterministic_in_seed(provider):
    a = provider.generate("alice", b"seed")
    b = provider.generate("alice", b"seed")
    c = provider.generate("alice", b"other")
    assert a.private_key == b.private_key
    assert a.private_key != c.private_key


def test_cross_signer_signature_rejected(provider):
    registry = KeyRegistry()
    alice = provider.generate("alice", b"seed")
    bob = provider.generate("bob", b"seed")
    registry.add(alice)
    registry.add(bob)
    entry = sign(digest(b"payload"), alice)
    # Claiming bob's identity over alice's signature must fail.
    from ota_stations.crypto import SignatureEntry
    forged = SignatureEntry("bob", entry.sig)
    assert not verify(digest(b"payload"), forged, registry, RevocationList())
