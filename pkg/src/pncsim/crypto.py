"""Deterministic cryptographic primitives for the charging-session simulator.

Algorithm stack:
  Hash            : SHA-256 (all digests are 32 bytes)
  Asymmetric      : X25519 key encapsulation + ChaCha20-Poly1305 payload
  Signatures      : Ed25519
  Symmetric (AEAD): ChaCha20-Poly1305
  Session KDF     : SHA-256 over a domain tag and both challenges

Every operation is reproducible: key generation takes an explicit 32-byte
seed and anything that needs entropy takes an explicit `DeterministicRng`
handle.  Nothing in this module reads `os.urandom`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives import serialization

DIGEST_LEN = 32
CHALLENGE_LEN = 32
KEY_LEN = 32
NONCE_LEN = 12

# Hybrid ciphertext layout: recipient tag (32) | ephemeral pub (32) | AEAD ct.
RECIPIENT_TAG_LEN = 32
EPHEMERAL_PUB_LEN = 32
AEAD_TAG_LEN = 16
PK_OVERHEAD = RECIPIENT_TAG_LEN + EPHEMERAL_PUB_LEN + AEAD_TAG_LEN

# Largest plaintext pk_encrypt accepts; protocol payloads are far smaller.
PK_PLAINTEXT_LIMIT = 4096

_KDF_SESSION_TAG = b"pncsim/session-key/v1"
_KDF_HYBRID_TAG = b"pncsim/hybrid-kem/v1"
_RECIPIENT_TAG = b"pncsim/recipient/v1"
_SIGN_SEED_TAG = b"pncsim/signing-seed/v1"


class CryptoError(Exception):
    """Base class for failures in this module."""


class TamperedError(CryptoError):
    """Ciphertext failed authentication."""


class WrongKeyError(TamperedError):
    """Ciphertext is not addressed to the supplied private key.

    A mismatched recipient tag is indistinguishable from a tampered one,
    so this is a refinement of `TamperedError`, not a sibling.
    """


class OversizeError(CryptoError):
    """Plaintext exceeds the scheme limit."""


class NonceReuseError(CryptoError):
    """A nonce was used twice under the same session key."""


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

class DeterministicRng:
    """SHA-256 counter DRBG.

    One master seed fans out into independent named substreams via
    `child()`, so each simulated component draws from its own stream and
    runs stay reproducible when components are added or reordered.
    """

    def __init__(self, seed: bytes | int):
        if isinstance(seed, int):
            seed = seed.to_bytes(32, "big", signed=False)
        self._state = hashlib.sha256(b"pncsim/rng/v1" + seed).digest()
        self._counter = 0
        self._buffer = b""

    def child(self, label: str) -> "DeterministicRng":
        """Derive an independent substream keyed by `label`."""
        return DeterministicRng(
            hashlib.sha256(self._state + b"/child/" + label.encode("utf-8")).digest()
        )

    def randbytes(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hashlib.sha256(
                self._state + self._counter.to_bytes(8, "big")
            ).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n). Rejection-sampled, so unbiased."""
        if n <= 0:
            raise ValueError("randrange bound must be positive")
        nbytes = (n.bit_length() + 7) // 8
        limit = (256**nbytes // n) * n
        while True:
            value = int.from_bytes(self.randbytes(nbytes), "big")
            if value < limit:
                return value % n

    def uniform(self, lo: float, hi: float) -> float:
        frac = int.from_bytes(self.randbytes(8), "big") / 2**64
        return lo + (hi - lo) * frac

    def choice(self, seq):
        return seq[self.randrange(len(seq))]


# ---------------------------------------------------------------------------
# Hashing
# ---------------------------------------------------------------------------

def sha256(data: bytes) -> bytes:
    """SHA-256 digest, 32 bytes."""
    return hashlib.sha256(data).digest()


def encode_timestamp(t_ms: int) -> bytes:
    """Millisecond timestamp as 8 bytes big-endian, the bit-exact form hashed
    into the timestamp chain."""
    return t_ms.to_bytes(8, "big", signed=False)


def hash_timestamp(t_ms: int) -> bytes:
    """First link of the timestamp chain: H(T1) over the canonical encoding."""
    return sha256(encode_timestamp(t_ms))


# ---------------------------------------------------------------------------
# Key pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """Raw 32-byte key pair. `private_key` never leaves the owning party."""

    public_key: bytes
    private_key: bytes


def generate_keypair(seed: bytes) -> KeyPair:
    """Deterministic X25519 encryption key pair from a 32-byte seed."""
    if len(seed) != 32:
        raise ValueError("keypair seed must be exactly 32 bytes")
    priv = X25519PrivateKey.from_private_bytes(seed)
    return KeyPair(public_key=_x25519_pub_bytes(priv), private_key=seed)


def generate_signing_keypair(seed: bytes) -> KeyPair:
    """Deterministic Ed25519 signing key pair from a 32-byte seed.

    The seed is domain-separated from the encryption scheme so the same
    seed never backs both roles.
    """
    if len(seed) != 32:
        raise ValueError("keypair seed must be exactly 32 bytes")
    raw = sha256(_SIGN_SEED_TAG + seed)
    priv = Ed25519PrivateKey.from_private_bytes(raw)
    pub = priv.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return KeyPair(public_key=pub, private_key=raw)


def _x25519_pub_bytes(priv: X25519PrivateKey) -> bytes:
    return priv.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


# ---------------------------------------------------------------------------
# Hybrid asymmetric encryption
# ---------------------------------------------------------------------------

def _hybrid_key(shared_secret: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    return sha256(_KDF_HYBRID_TAG + shared_secret + ephemeral_pub + recipient_pub)


def _recipient_tag(public_key: bytes) -> bytes:
    return sha256(_RECIPIENT_TAG + public_key)


def pk_encrypt(rng: DeterministicRng, public_key: bytes, plaintext: bytes) -> bytes:
    """Encrypt to `public_key` with a fresh ephemeral X25519 encapsulation.

    The recipient tag and ephemeral key are bound into the AEAD as
    associated data, so any single-byte change to the ciphertext is
    detected at decryption.
    """
    if len(plaintext) > PK_PLAINTEXT_LIMIT:
        raise OversizeError(
            f"plaintext of {len(plaintext)} bytes exceeds limit {PK_PLAINTEXT_LIMIT}"
        )
    eph_priv = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    eph_pub = _x25519_pub_bytes(eph_priv)
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(public_key))
    key = _hybrid_key(shared, eph_pub, public_key)
    tag = _recipient_tag(public_key)
    aead = ChaCha20Poly1305(key)
    ct = aead.encrypt(b"\x00" * NONCE_LEN, plaintext, tag + eph_pub)
    return tag + eph_pub + ct


def pk_decrypt(private_key: bytes, ciphertext: bytes) -> bytes:
    """Decrypt a `pk_encrypt` ciphertext with the matching private key.

    Raises:
        WrongKeyError: the recipient tag does not match `private_key`.
        TamperedError: the ciphertext fails AEAD authentication.
    """
    if len(ciphertext) < PK_OVERHEAD:
        raise TamperedError("ciphertext shorter than scheme overhead")
    priv = X25519PrivateKey.from_private_bytes(private_key)
    my_pub = _x25519_pub_bytes(priv)
    tag = ciphertext[:RECIPIENT_TAG_LEN]
    eph_pub = ciphertext[RECIPIENT_TAG_LEN:RECIPIENT_TAG_LEN + EPHEMERAL_PUB_LEN]
    ct = ciphertext[RECIPIENT_TAG_LEN + EPHEMERAL_PUB_LEN:]
    if tag != _recipient_tag(my_pub):
        raise WrongKeyError("ciphertext is not addressed to this key")
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = _hybrid_key(shared, eph_pub, my_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(b"\x00" * NONCE_LEN, ct, tag + eph_pub)
    except InvalidTag:
        raise TamperedError("ciphertext failed authentication") from None


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

def sign(private_key: bytes, message: bytes) -> bytes:
    """Ed25519 signature (64 bytes) over `message`."""
    return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff `signature` is a valid Ed25519 signature by `public_key`."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except Exception:
        return False


# ---------------------------------------------------------------------------
# Challenges and session keys
# ---------------------------------------------------------------------------

def random_challenge(rng: DeterministicRng) -> bytes:
    """32 uniformly random bytes drawn from the supplied stream."""
    return rng.randbytes(CHALLENGE_LEN)


def derive_session_key(c_cyber: bytes, c_physical: bytes, context: bytes) -> bytes:
    """Session key from both verified challenges plus session context.

    Both sides of a completed handshake hold the same challenge values, so
    both compute a byte-identical key.  Challenges are fixed-width (32
    bytes each), which keeps the concatenation injective for any context.
    """
    if len(c_cyber) != CHALLENGE_LEN or len(c_physical) != CHALLENGE_LEN:
        raise ValueError("challenges must be exactly 32 bytes")
    return sha256(_KDF_SESSION_TAG + c_cyber + c_physical + context)


# ---------------------------------------------------------------------------
# Symmetric AEAD for the transaction phase
# ---------------------------------------------------------------------------

def sym_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    """ChaCha20-Poly1305 encrypt. Caller guarantees nonce uniqueness."""
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def sym_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    """ChaCha20-Poly1305 decrypt. Raises `TamperedError` on any failure;
    a wrong key and a modified ciphertext are cryptographically
    indistinguishable here."""
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise TamperedError("symmetric ciphertext failed authentication") from None


class SessionCipher:
    """Per-session AEAD wrapper that enforces nonce uniqueness.

    Each direction of a session uses its own counter parity (initiator
    even, responder odd) so two honest parties never collide.
    """

    def __init__(self, key: bytes, initiator: bool):
        if len(key) != KEY_LEN:
            raise ValueError("session key must be 32 bytes")
        self._key = key
        self._counter = 0 if initiator else 1
        self._used: set[bytes] = set()

    def next_nonce(self) -> bytes:
        nonce = self._counter.to_bytes(NONCE_LEN, "big")
        self._counter += 2
        return nonce

    def encrypt(self, plaintext: bytes, nonce: bytes | None = None, aad: bytes = b"") -> tuple[bytes, bytes]:
        nonce = self.next_nonce() if nonce is None else nonce
        if nonce in self._used:
            raise NonceReuseError("nonce already used in this session")
        self._used.add(nonce)
        return nonce, sym_encrypt(self._key, nonce, plaintext, aad)

    def decrypt(self, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
        if nonce in self._used:
            raise NonceReuseError("nonce already seen in this session")
        plaintext = sym_decrypt(self._key, nonce, ciphertext, aad)
        self._used.add(nonce)
        return plaintext
