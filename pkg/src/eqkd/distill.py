"""Finite-key secret length, Toeplitz privacy amplification and key storage."""
from __future__ import annotations

import hashlib
import hmac
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class DistillationParams:
    n_ec: int = 16384
    k: int = 100
    f_ec: float = 1.06
    eps_pe: float = 1e-10
    eps_hash: float = 1e-10
    # X coincidences aggregated into one phase-feedback step.
    feedback_min_x: int = 1000
    feedback_gain: float = 0.5
    feedback_delta_rad: float = 0.05
    # Periods whose QBERz exceeds this are not distilled.
    qber_abort: float = 0.11

    @property
    def n_z(self) -> int:
        return self.n_ec * self.k

    def validate(self):
        if self.n_ec <= 0 or self.k <= 0:
            raise ValueError("n_ec and k must be positive")
        for name in ("eps_pe", "eps_hash"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        return self


class KeyConfirmationFailed(Exception):
    """Confirmation tags differ; the period is discarded."""


def binary_entropy(x: float) -> float:
    """h(x) in bits, with h(0) = h(1) = 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def leakage_model(f_ec: float, n: int, q: float) -> float:
    """Predicted reconciliation leakage f * n * h(q); prediction only."""
    return f_ec * n * binary_entropy(q)


def phase_error_upper_bound(phi_x: float, n_x: int, n_z: int, eps_pe: float) -> float:
    """Random-sampling upper bound on the Z phase error rate, clamped at 0.5."""
    if n_x < 1:
        raise ValueError("need at least one X coincidence")
    dev = math.sqrt((n_x + n_z) * (n_x + 1) * math.log(1.0 / eps_pe) / (2.0 * n_x**2 * n_z))
    return min(phi_x + dev, 0.5)


def secret_key_length(n_z: int, phi_u: float, lambda_ec_total: float, eps_hash: float) -> int:
    """Extractable length; 0 means no key for this period."""
    raw = n_z * (1.0 - binary_entropy(min(phi_u, 0.5))) - lambda_ec_total - 2.0 * math.log2(1.0 / eps_hash)
    return max(0, int(math.floor(raw)))


@dataclass
class SecurityEstimate:
    phi_x: float
    n_x: int
    phi_u: float
    lambda_ec_total: int
    l: int
    n_z: int


def estimate_security(phi_x: float, n_x: int, lambda_ec_total: int, params: DistillationParams,
                      n_z: int | None = None) -> SecurityEstimate:
    n_z = params.n_z if n_z is None else n_z
    phi_u = phase_error_upper_bound(phi_x, max(n_x, 1), n_z, params.eps_pe)
    l = secret_key_length(n_z, phi_u, lambda_ec_total, params.eps_hash)
    return SecurityEstimate(phi_x, n_x, phi_u, int(lambda_ec_total), l, n_z)


def toeplitz_extract(bits, seed, l: int) -> np.ndarray:
    """Multiply ``bits`` by the l x n Toeplitz matrix given by ``seed``.

    Matrix convention: T[i, j] = seed[j - i + l - 1], so row 0 is
    seed[l-1 : l-1+n] and column 0 is seed[0:l] read bottom-up. Computed as
    a real FFT correlation followed by reduction mod 2; every entry of the
    correlation is an integer no larger than n, so rounding is exact.
    """
    x = np.asarray(bits, dtype=np.uint8)
    s = np.asarray(seed, dtype=np.uint8)
    n = len(x)
    if not 0 <= l <= n:
        raise ValueError("need 0 <= l <= n")
    if len(s) != n + l - 1 and l > 0:
        raise ValueError(f"seed must have n + l - 1 = {n + l - 1} bits, got {len(s)}")
    if l == 0:
        return np.zeros(0, dtype=np.uint8)
    size = 1 << (len(s) + n - 1).bit_length()
    conv = np.fft.irfft(np.fft.rfft(s.astype(np.float64), size) * np.fft.rfft(x[::-1].astype(np.float64), size), size)
    # y_i = conv[n + l - 2 - i]
    ys = conv[n - 1 : n + l - 1][::-1]
    yi = np.rint(ys)
    if np.max(np.abs(ys - yi)) > 0.25:
        raise FloatingPointError("FFT correlation lost integer precision")
    return (yi.astype(np.int64) & 1).astype(np.uint8)


def key_tag(bits, mac_key: bytes, key_id: int) -> bytes:
    """128-bit keyed confirmation tag of a candidate key."""
    h = hashlib.blake2b(digest_size=16, key=mac_key, person=b"eqkd-confirm")
    h.update(struct.pack("<QQ", key_id, len(bits)))
    h.update(np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes())
    return h.digest()


@dataclass
class SecretKey:
    key_id: int
    bits: np.ndarray
    block_ids: list = field(default_factory=list)
    phi_u: float = 0.0
    lambda_ec_total: int = 0
    n_z: int = 0

    @property
    def length(self) -> int:
        return len(self.bits)


def confirm_keys(local: SecretKey, remote_tag: bytes, mac_key: bytes) -> SecretKey:
    """Accept ``local`` if its tag equals the peer's, else raise."""
    if not hmac.compare_digest(key_tag(local.bits, mac_key, local.key_id), remote_tag):
        raise KeyConfirmationFailed(f"key {local.key_id}: confirmation tags differ")
    return local


_STORE_MAGIC = b"EQKDKEYS"


class KeyStore:
    """Append-only binary key file with a text index next to it.

    Layout: magic, u32 header length, JSON header (config hash, seed), then
    records of u64 key id, u32 bit length and the packed bits (little-endian).
    """

    def __init__(self, path, config_hash: str = "", seed: int = 0):
        self.path = Path(path)
        self.index_path = self.path.with_suffix(self.path.suffix + ".idx")
        if not self.path.exists():
            header = json.dumps({"config_hash": config_hash, "seed": seed}).encode()
            with open(self.path, "wb") as f:
                f.write(_STORE_MAGIC + struct.pack("<I", len(header)) + header)
            with open(self.index_path, "w") as f:
                f.write(f"# config_hash={config_hash} seed={seed}\n# key_id length phi_u lambda_ec blocks\n")

    def append(self, key: SecretKey):
        with open(self.path, "ab") as f:
            f.write(struct.pack("<QI", key.key_id, key.length))
            f.write(np.packbits(key.bits).tobytes())
        with open(self.index_path, "a") as f:
            blocks = f"{key.block_ids[0]}-{key.block_ids[-1]}" if key.block_ids else "-"
            f.write(f"{key.key_id} {key.length} {key.phi_u:.6g} {key.lambda_ec_total} {blocks}\n")

    @staticmethod
    def read(path) -> tuple[dict, list[tuple[int, np.ndarray]]]:
        data = Path(path).read_bytes()
        if data[:8] != _STORE_MAGIC:
            raise ValueError("not a key store")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12 : 12 + hlen])
        pos = 12 + hlen
        keys = []
        while pos < len(data):
            kid, nbits = struct.unpack_from("<QI", data, pos)
            pos += 12
            nbytes = (nbits + 7) // 8
            bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos))[:nbits]
            pos += nbytes
            keys.append((kid, bits))
        return header, keys


class MetricsLog:
    """Newline-delimited JSON metrics, one record per event."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, default=float) + "\n")
