"""Per-round hybrid encryption of client models.

The server makes a fresh RSA-2048 keypair every round and publishes the
public half. Each client payload gets its own AES-256-GCM key and nonce; the
AES key is wrapped with RSA-OAEP(SHA-256) under the round key.

Envelope layout (little-endian)::

    version u8 | wrapped_key_len u16 | wrapped_key | nonce (12) | ciphertext | tag (16)

Randomness comes from an entropy source object so simulations can run with a
seeded byte stream and still produce byte-identical ledgers.
"""
from __future__ import annotations

import hashlib
import math
import os
import random
import struct
from dataclasses import dataclass

import gmpy2
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, CryptoError, SerializationError, UnwrapError
from .model import ModelWeights
from .wire import ModelMetadata, deserialize_model, serialize_model

ENVELOPE_VERSION = 1
RSA_BITS = 2048
RSA_EXPONENT = 65537
AES_KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
_ENV_HEADER = struct.Struct("<BH")


class SystemEntropy:
    """Operating-system randomness; the production source."""

    def bytes(self, n: int) -> bytes:
        return os.urandom(n)


class SeededEntropy:
    """Deterministic byte stream for reproducible simulations. Not for real secrets."""

    def __init__(self, seed):
        self._rng = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)


def derive_entropy(seed, *labels) -> SeededEntropy:
    """Independent seeded stream for one purpose, e.g. ``derive_entropy(7, "round-key", 3)``."""
    return SeededEntropy("/".join(str(part) for part in (seed, *labels)))


@dataclass(frozen=True)
class RoundKeyPair:
    round_id: int
    public_key: rsa.RSAPublicKey
    private_key: rsa.RSAPrivateKey

    @property
    def public_der(self) -> bytes:
        return public_key_der(self.public_key)


def public_key_der(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.DER,
                            serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public_key(der: bytes) -> rsa.RSAPublicKey:
    try:
        key = serialization.load_der_public_key(der)
    except ValueError as exc:
        raise CryptoError(f"invalid public key: {exc}") from exc
    if not isinstance(key, rsa.RSAPublicKey):
        raise CryptoError("round key is not an RSA key")
    return key


def _seeded_prime(entropy, bits: int, e: int) -> int:
    while True:
        candidate = int.from_bytes(entropy.bytes(bits // 8), "big")
        # top two bits set keeps p*q at the full modulus size
        candidate |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and math.gcd(e, p - 1) == 1:
            return p


def _keypair_from_entropy(entropy, bits: int = RSA_BITS) -> rsa.RSAPrivateKey:
    e = RSA_EXPONENT
    p = _seeded_prime(entropy, bits // 2, e)
    q = _seeded_prime(entropy, bits // 2, e)
    while q == p:
        q = _seeded_prime(entropy, bits // 2, e)
    d = pow(e, -1, math.lcm(p - 1, q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p, q, d,
        rsa.rsa_crt_dmp1(d, p), rsa.rsa_crt_dmq1(d, q), rsa.rsa_crt_iqmp(p, q),
        rsa.RSAPublicNumbers(e, p * q),
    )
    return numbers.private_key()


def generate_round_keypair(round_id: int, entropy=None) -> RoundKeyPair:
    """Fresh RSA-2048 keypair; deterministic only when a seeded ``entropy`` is injected."""
    try:
        if entropy is None or isinstance(entropy, SystemEntropy):
            private = rsa.generate_private_key(public_exponent=RSA_EXPONENT, key_size=RSA_BITS)
        else:
            private = _keypair_from_entropy(entropy)
    except (ValueError, TypeError, OSError) as exc:
        raise CryptoError(f"key generation failed: {exc}") from exc
    return RoundKeyPair(round_id, private.public_key(), private)


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:length])


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def wrap_key(public_key: rsa.RSAPublicKey, key: bytes, entropy) -> bytes:
    """RSAES-OAEP (SHA-256, MGF1-SHA-256, empty label) with the seed drawn from ``entropy``.

    Encoded by hand because the library encryptor cannot take injected
    randomness; the output is standard OAEP and decrypts with the library.
    """
    nums = public_key.public_numbers()
    k = (nums.n.bit_length() + 7) // 8
    h_len = hashlib.sha256().digest_size
    if len(key) > k - 2 * h_len - 2:
        raise CryptoError("key too long for OAEP")
    db = hashlib.sha256(b"").digest() + bytes(k - len(key) - 2 * h_len - 2) + b"\x01" + key
    seed = entropy.bytes(h_len)
    masked_db = _xor(db, _mgf1(seed, k - h_len - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, h_len))
    em = int.from_bytes(b"\x00" + masked_seed + masked_db, "big")
    return pow(em, nums.e, nums.n).to_bytes(k, "big")


_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()),
                     algorithm=hashes.SHA256(), label=None)


def unwrap_key(private_key: rsa.RSAPrivateKey, wrapped: bytes) -> bytes:
    try:
        return private_key.decrypt(wrapped, _OAEP)
    except ValueError as exc:
        raise UnwrapError("wrapped key does not open with this private key") from exc


@dataclass(frozen=True)
class EncryptedModelPayload:
    wrapped_key: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes
    version: int = ENVELOPE_VERSION

    def header(self) -> bytes:
        return _ENV_HEADER.pack(self.version, len(self.wrapped_key)) + self.wrapped_key

    def to_bytes(self) -> bytes:
        return self.header() + self.nonce + self.ciphertext + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedModelPayload":
        if len(data) < _ENV_HEADER.size:
            raise SerializationError("envelope shorter than its header")
        version, wk_len = _ENV_HEADER.unpack_from(data, 0)
        if version != ENVELOPE_VERSION:
            raise SerializationError(f"unsupported envelope version {version}")
        pos = _ENV_HEADER.size
        if len(data) < pos + wk_len + NONCE_BYTES + TAG_BYTES:
            raise SerializationError("envelope truncated")
        wrapped = data[pos:pos + wk_len]
        pos += wk_len
        nonce = data[pos:pos + NONCE_BYTES]
        pos += NONCE_BYTES
        return cls(bytes(wrapped), bytes(nonce), bytes(data[pos:len(data) - TAG_BYTES]),
                   bytes(data[len(data) - TAG_BYTES:]), version)


def encrypt_bytes(plaintext: bytes, public_key: rsa.RSAPublicKey, entropy=None) -> EncryptedModelPayload:
    entropy = entropy or SystemEntropy()
    sym_key = entropy.bytes(AES_KEY_BYTES)
    nonce = entropy.bytes(NONCE_BYTES)
    wrapped = wrap_key(public_key, sym_key, entropy)
    shell = EncryptedModelPayload(wrapped, nonce, b"", b"")
    sealed = AESGCM(sym_key).encrypt(nonce, plaintext, shell.header())
    return EncryptedModelPayload(wrapped, nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:])


def decrypt_bytes(payload: EncryptedModelPayload, private_key: rsa.RSAPrivateKey) -> bytes:
    sym_key = unwrap_key(private_key, payload.wrapped_key)
    if len(sym_key) != AES_KEY_BYTES or len(payload.nonce) != NONCE_BYTES:
        raise UnwrapError("unwrapped key or nonce has the wrong size")
    try:
        return AESGCM(sym_key).decrypt(payload.nonce, payload.ciphertext + payload.auth_tag,
                                       payload.header())
    except InvalidTag as exc:
        raise AuthenticationError("ciphertext failed authentication") from exc


def encrypt_model(model: ModelWeights, metadata: ModelMetadata, round_public_key,
                  entropy=None) -> EncryptedModelPayload:
    return encrypt_bytes(serialize_model(model, metadata), round_public_key, entropy)


def decrypt_model(payload, round_private_key) -> tuple[ModelWeights, ModelMetadata]:
    if isinstance(payload, (bytes, bytearray, memoryview)):
        payload = EncryptedModelPayload.from_bytes(bytes(payload))
    return deserialize_model(decrypt_bytes(payload, round_private_key))


def envelope_size(plaintext_len: int, wrapped_key_len: int = RSA_BITS // 8) -> int:
    return _ENV_HEADER.size + wrapped_key_len + NONCE_BYTES + plaintext_len + TAG_BYTES
