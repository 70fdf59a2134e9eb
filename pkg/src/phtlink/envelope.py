"""Sign-then-encrypt hybrid envelopes for station-to-station transport.

A SealedPackage carries a payload that only the intended recipient can read,
and that the recipient can attribute to the sending station and to one run:

    wrapped_content_key   fresh AES-256 content key (plus data nonce), wrapped
                          under the recipient's public key via an X25519 KEM
                          (ephemeral ECDH + HKDF-SHA256 + AES-GCM key wrap)
    ciphertext            AES-256-GCM over (payload || inner signature), with
                          the canonical header JSON as associated data
    outer_auth_tag        the GCM tag over the ciphertext + header

The inner signature is Ed25519 over (payload, run_id, sender station id), so
a package replayed into another run fails inner verification even though its
ciphertext is intact.

Opening runs the three phases in order and attributes failures to the phase
that rejected: outer integrity (tampered ciphertext, tag, or header), content
key unwrap / decryption (wrong private key, tampered wrap), inner signature
(wrong sender key, wrong run). No partial plaintext ever escapes a failure.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import b64decode, b64encode, canonical_json_bytes, from_json_bytes
from .errors import (
    DecodeError,
    DecryptionFailure,
    EntropyUnavailable,
    InnerSignatureFailure,
    OuterIntegrityFailure,
    RunMismatch,
)

ALGORITHMS = {
    "kem": "X25519-HKDF-SHA256",
    "aead": "AES-256-GCM",
    "sig": "Ed25519",
}

_GCM_TAG_LEN = 16
_GCM_NONCE_LEN = 12
_SIG_LEN = 64
_KEK_INFO = b"phtlink-envelope-kek"

STATIC_SCOPE = "static"


def _random_bytes(n: int) -> bytes:
    try:
        return os.urandom(n)
    except OSError as exc:  # pragma: no cover - platform failure
        raise EntropyUnavailable(str(exc)) from exc


def _new_key_id(run_id: str | None, kind: str) -> str:
    return f"{run_id or STATIC_SCOPE}:{kind}:{_random_bytes(4).hex()}"


def _scope_of(key_id: str) -> str:
    return key_id.split(":", 1)[0]


@dataclass(frozen=True)
class KeyPair:
    """X25519 encryption keypair; the private half never enters a message."""

    public_encryption_key: bytes
    private_decryption_key: bytes
    key_id: str

    @property
    def run_scope(self) -> str | None:
        scope = _scope_of(self.key_id)
        return None if scope == STATIC_SCOPE else scope

    def public_only(self) -> "PublicEncryptionKey":
        return PublicEncryptionKey(self.public_encryption_key, self.key_id)


@dataclass(frozen=True)
class PublicEncryptionKey:
    """Distributable half of a KeyPair."""

    public_encryption_key: bytes
    key_id: str

    @property
    def run_scope(self) -> str | None:
        scope = _scope_of(self.key_id)
        return None if scope == STATIC_SCOPE else scope


@dataclass(frozen=True)
class SigningKeys:
    """Ed25519 signature pair; the verification key alone cannot sign."""

    signing_key: bytes
    verification_key: bytes
    key_id: str

    @property
    def run_scope(self) -> str | None:
        scope = _scope_of(self.key_id)
        return None if scope == STATIC_SCOPE else scope


@dataclass(frozen=True)
class SealedPackage:
    sender_station_id: str
    run_id: str
    key_ids: tuple[str, str]  # (encryption key id, signing key id)
    wrapped_content_key: bytes
    ciphertext: bytes
    outer_auth_tag: bytes

    def header(self) -> dict:
        return {
            "sender_station_id": self.sender_station_id,
            "run_id": self.run_id,
            "key_ids": list(self.key_ids),
            "algorithms": ALGORITHMS,
        }

    def to_bytes(self) -> bytes:
        return canonical_json_bytes(
            {
                "header": self.header(),
                "wrapped_content_key": b64encode(self.wrapped_content_key),
                "ciphertext": b64encode(self.ciphertext),
                "outer_auth_tag": b64encode(self.outer_auth_tag),
            }
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedPackage":
        try:
            doc = from_json_bytes(data)
            header = doc["header"]
            return cls(
                sender_station_id=header["sender_station_id"],
                run_id=header["run_id"],
                key_ids=(header["key_ids"][0], header["key_ids"][1]),
                wrapped_content_key=b64decode(doc["wrapped_content_key"]),
                ciphertext=b64decode(doc["ciphertext"]),
                outer_auth_tag=b64decode(doc["outer_auth_tag"]),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DecodeError(0, f"bad sealed package: {exc}") from exc


def generate_encryption_keypair(run_id: str | None = None) -> KeyPair:
    """Fresh X25519 keypair, optionally bound to one run via its key id."""
    private = X25519PrivateKey.generate()
    return KeyPair(
        public_encryption_key=_raw_public(private.public_key()),
        private_decryption_key=_raw_private(private),
        key_id=_new_key_id(run_id, "enc"),
    )


def generate_signing_keys(run_id: str | None = None) -> SigningKeys:
    """Fresh Ed25519 pair, optionally bound to one run via its key id."""
    private = Ed25519PrivateKey.generate()
    return SigningKeys(
        signing_key=_raw_private(private),
        verification_key=_raw_public(private.public_key()),
        key_id=_new_key_id(run_id, "sig"),
    )


def _raw_private(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def _raw_public(key) -> bytes:
    return key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def _inner_signed_payload(plaintext: bytes, run_id: str, sender_id: str) -> bytes:
    run = run_id.encode("utf-8")
    sender = sender_id.encode("utf-8")
    return (
        struct.pack(">Q", len(plaintext))
        + plaintext
        + struct.pack(">H", len(run))
        + run
        + struct.pack(">H", len(sender))
        + sender
    )


def sign_payload(signing_key: bytes, payload: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(signing_key).sign(payload)


def verify_payload(verification_key: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verification_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def _derive_kek(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=_KEK_INFO + ephemeral_pub + recipient_pub,
    ).derive(shared)


def _check_run_scope(key_id: str, run_id: str) -> None:
    scope = _scope_of(key_id)
    if scope != STATIC_SCOPE and scope != run_id:
        raise RunMismatch(f"key {key_id} is bound to run {scope!r}, not {run_id!r}")


def seal(
    plaintext: bytes,
    run_id: str,
    sender_id: str,
    recipient_pub: KeyPair | PublicEncryptionKey,
    signer: SigningKeys,
) -> SealedPackage:
    """Sign plaintext for this run, then hybrid-encrypt to the recipient."""
    _check_run_scope(recipient_pub.key_id, run_id)
    _check_run_scope(signer.key_id, run_id)

    inner_sig = sign_payload(
        signer.signing_key, _inner_signed_payload(plaintext, run_id, sender_id)
    )
    inner = plaintext + inner_sig

    header = {
        "sender_station_id": sender_id,
        "run_id": run_id,
        "key_ids": [recipient_pub.key_id, signer.key_id],
        "algorithms": ALGORITHMS,
    }
    aad = canonical_json_bytes(header)

    content_key = _random_bytes(32)
    data_nonce = _random_bytes(_GCM_NONCE_LEN)
    sealed = AESGCM(content_key).encrypt(data_nonce, inner, aad)
    ciphertext, tag = sealed[:-_GCM_TAG_LEN], sealed[-_GCM_TAG_LEN:]

    ephemeral = X25519PrivateKey.generate()
    ephemeral_pub = _raw_public(ephemeral.public_key())
    recipient_raw = recipient_pub.public_encryption_key
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_raw))
    kek = _derive_kek(shared, ephemeral_pub, recipient_raw)
    wrap_nonce = _random_bytes(_GCM_NONCE_LEN)
    wrapped = AESGCM(kek).encrypt(wrap_nonce, content_key + data_nonce, ephemeral_pub)

    return SealedPackage(
        sender_station_id=sender_id,
        run_id=run_id,
        key_ids=(recipient_pub.key_id, signer.key_id),
        wrapped_content_key=ephemeral_pub + wrap_nonce + wrapped,
        ciphertext=ciphertext,
        outer_auth_tag=tag,
    )


def open_package(
    pkg: SealedPackage,
    recipient_priv: KeyPair,
    sender_verif: bytes,
    expected_run_id: str | None = None,
) -> bytes:
    """Verification-decryption-verification opening of a sealed package.

    Phases, in order: outer authentication (GCM tag over header + ciphertext),
    content key unwrap + decrypt, inner signature binding the plaintext to the
    run and the sender. Each phase raises its own failure and nothing is
    returned unless all three pass. Passing expected_run_id rejects packages
    signed for a different run.
    """
    blob = pkg.wrapped_content_key
    if len(blob) < 32 + _GCM_NONCE_LEN + _GCM_TAG_LEN:
        raise DecryptionFailure("wrapped content key too short")
    ephemeral_pub, wrap_nonce, wrapped = (
        blob[:32],
        blob[32 : 32 + _GCM_NONCE_LEN],
        blob[32 + _GCM_NONCE_LEN :],
    )
    try:
        shared = X25519PrivateKey.from_private_bytes(
            recipient_priv.private_decryption_key
        ).exchange(X25519PublicKey.from_public_bytes(ephemeral_pub))
        kek = _derive_kek(shared, ephemeral_pub, recipient_priv.public_encryption_key)
        unwrapped = AESGCM(kek).decrypt(wrap_nonce, wrapped, ephemeral_pub)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionFailure(f"content key unwrap failed: {exc}") from None
    if len(unwrapped) != 32 + _GCM_NONCE_LEN:
        raise DecryptionFailure("unwrapped content key has wrong length")
    content_key, data_nonce = unwrapped[:32], unwrapped[32:]

    aad = canonical_json_bytes(pkg.header())
    try:
        inner = AESGCM(content_key).decrypt(
            data_nonce, pkg.ciphertext + pkg.outer_auth_tag, aad
        )
    except InvalidTag:
        raise OuterIntegrityFailure("outer authentication tag rejected") from None

    if len(inner) < _SIG_LEN:
        raise InnerSignatureFailure("payload too short to carry a signature")
    plaintext, inner_sig = inner[:-_SIG_LEN], inner[-_SIG_LEN:]

    bound_run = expected_run_id if expected_run_id is not None else pkg.run_id
    signed = _inner_signed_payload(plaintext, bound_run, pkg.sender_station_id)
    if not verify_payload(sender_verif, signed, inner_sig):
        raise InnerSignatureFailure(
            f"inner signature rejected for run {bound_run!r}, sender {pkg.sender_station_id!r}"
        )
    return plaintext


# ---------------------------------------------------------------------------
# PEM persistence for key files
# ---------------------------------------------------------------------------

def encryption_keypair_to_pem(kp: KeyPair) -> tuple[bytes, bytes]:
    private = X25519PrivateKey.from_private_bytes(kp.private_decryption_key)
    return _private_pem(private), _public_pem(private.public_key())


def signing_keys_to_pem(sk: SigningKeys) -> tuple[bytes, bytes]:
    private = Ed25519PrivateKey.from_private_bytes(sk.signing_key)
    return _private_pem(private), _public_pem(private.public_key())


def encryption_keypair_from_pem(private_pem: bytes, key_id: str) -> KeyPair:
    key = serialization.load_pem_private_key(private_pem, password=None)
    if not isinstance(key, X25519PrivateKey):
        raise ValueError("expected an X25519 private key")
    return KeyPair(
        public_encryption_key=_raw_public(key.public_key()),
        private_decryption_key=_raw_private(key),
        key_id=key_id,
    )


def signing_keys_from_pem(private_pem: bytes, key_id: str) -> SigningKeys:
    key = serialization.load_pem_private_key(private_pem, password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ValueError("expected an Ed25519 private key")
    return SigningKeys(
        signing_key=_raw_private(key),
        verification_key=_raw_public(key.public_key()),
        key_id=key_id,
    )


def public_key_from_pem(pem: bytes) -> bytes:
    """Raw bytes of an X25519 or Ed25519 public key PEM."""
    key = serialization.load_pem_public_key(pem)
    if not isinstance(key, (X25519PublicKey, Ed25519PublicKey)):
        raise ValueError("expected an X25519 or Ed25519 public key")
    return _raw_public(key)


def _private_pem(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def _public_pem(key) -> bytes:
    return key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    )
