"""Deterministic cryptographic primitives.

Page sealing is AES-256-GCM with a 96-bit counter-derived nonce; digests
are SHA-256.  Key wrapping is a static-static X25519 agreement (developer
private half against Guardian public half) plus an Ed25519 signature, so a
whole run replays bit-identically from the scenario RNG: no primitive here
draws ambient randomness.
"""

from dataclasses import dataclass
import hashlib
import hmac
import random

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .layout import PAGE_SIZE

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
DIGEST_SIZE = 32


class AuthFailure(Exception):
    """Decryption or signature verification failed."""


@dataclass(frozen=True)
class SymKey:
    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != KEY_SIZE:
            raise ValueError("symmetric keys are 32 bytes")


def gen_sym_key(rng: random.Random) -> SymKey:
    return SymKey(rng.randbytes(KEY_SIZE))


def make_nonce(lane: int, counter: int) -> bytes:
    """96-bit nonce: a 32-bit lane (unique per process record) and a 64-bit
    monotone counter.  Lanes never repeat, so (key, nonce) pairs are unique
    even when forked processes share a key."""
    return (lane & 0xFFFFFFFF).to_bytes(4, "little") + counter.to_bytes(8, "little")


@dataclass(frozen=True)
class SealedPage:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def __post_init__(self):
        if len(self.nonce) != NONCE_SIZE or len(self.tag) != TAG_SIZE:
            raise ValueError("bad sealed page framing")
        if len(self.ciphertext) != PAGE_SIZE:
            raise ValueError("sealed pages hold exactly one page")


def seal(key: SymKey, nonce: bytes, plaintext: bytes, aad: bytes) -> SealedPage:
    if len(plaintext) != PAGE_SIZE:
        raise ValueError("plaintext must be exactly one page")
    blob = AESGCM(key.bytes).encrypt(nonce, bytes(plaintext), aad)
    return SealedPage(nonce=nonce, ciphertext=blob[:-TAG_SIZE], tag=blob[-TAG_SIZE:])


def open_sealed(key: SymKey, sealed: SealedPage, aad: bytes) -> bytes:
    try:
        return AESGCM(key.bytes).decrypt(
            sealed.nonce, sealed.ciphertext + sealed.tag, aad
        )
    except InvalidTag as exc:
        raise AuthFailure("page authentication failed") from exc


def digest(data: bytes) -> bytes:
    return hashlib.sha256(bytes(data)).digest()


def digest_eq(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


@dataclass(frozen=True)
class KeyPair:
    """Key-exchange and signing halves derived from one 32-byte seed."""

    seed: bytes

    @property
    def kex_priv(self) -> X25519PrivateKey:
        return X25519PrivateKey.from_private_bytes(_expand(self.seed, b"kex"))

    @property
    def sign_priv(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(_expand(self.seed, b"sign"))

    def public(self) -> "PublicKey":
        return PublicKey(
            kex=self.kex_priv.public_key().public_bytes_raw(),
            sign=self.sign_priv.public_key().public_bytes_raw(),
        )


@dataclass(frozen=True)
class PublicKey:
    kex: bytes
    sign: bytes


def gen_keypair(rng: random.Random) -> KeyPair:
    return KeyPair(rng.randbytes(32))


def keypair_from_seed(seed: bytes) -> KeyPair:
    if len(seed) != 32:
        raise ValueError("key seed must be 32 bytes")
    return KeyPair(seed)


def _expand(seed: bytes, label: bytes) -> bytes:
    return hashlib.sha256(seed + b"/" + label).digest()


def _kek(shared: bytes) -> SymKey:
    return SymKey(hashlib.sha256(b"wrap/" + shared).digest())


@dataclass(frozen=True)
class WrappedKeyBlob:
    ciphertext: bytes
    nonce: bytes
    tag: bytes
    signature: bytes


_WRAP_AAD = b"wrapped-image-keys"


def wrap_keys(keys: list[SymKey], guardian_pub: PublicKey, dev_priv: KeyPair) -> WrappedKeyBlob:
    """Seal symmetric keys to the Guardian's public half, signed by the
    developer so the Guardian can check who produced them."""
    shared = dev_priv.kex_priv.exchange(X25519PublicKey.from_public_bytes(guardian_pub.kex))
    payload = b"".join(k.bytes for k in keys)
    nonce = bytes(NONCE_SIZE)  # one wrap per (dev, guardian, payload); static-static KEK
    blob = AESGCM(_kek(shared).bytes).encrypt(nonce, payload, _WRAP_AAD)
    ct, tag = blob[:-TAG_SIZE], blob[-TAG_SIZE:]
    sig = dev_priv.sign_priv.sign(ct + tag)
    return WrappedKeyBlob(ciphertext=ct, nonce=nonce, tag=tag, signature=sig)


def unwrap_keys(blob: WrappedKeyBlob, guardian_priv: KeyPair, dev_pub: PublicKey) -> list[SymKey]:
    try:
        Ed25519PublicKey.from_public_bytes(dev_pub.sign).verify(
            blob.signature, blob.ciphertext + blob.tag
        )
    except InvalidSignature as exc:
        raise AuthFailure("key blob signature invalid") from exc
    shared = guardian_priv.kex_priv.exchange(X25519PublicKey.from_public_bytes(dev_pub.kex))
    try:
        payload = AESGCM(_kek(shared).bytes).decrypt(
            blob.nonce, blob.ciphertext + blob.tag, _WRAP_AAD
        )
    except InvalidTag as exc:
        raise AuthFailure("key blob does not open under this Guardian key") from exc
    if len(payload) % KEY_SIZE:
        raise AuthFailure("malformed key payload")
    return [SymKey(payload[i : i + KEY_SIZE]) for i in range(0, len(payload), KEY_SIZE)]
