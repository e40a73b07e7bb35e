"""System-resource extraction from call arguments and signed feature hashing.

String arguments that look like one of five resource kinds are parsed into
hierarchical substring chains (path prefixes, hostname suffixes) and folded
into a fixed number of signed bins: bin i accumulates xi(s) over substrings
s with h(s) = i.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import re

import numpy as np

from .errors import EmptyResource

DEFAULT_BINS = 128
DEFAULT_HASH_SEED = 9


class ResourceKind(enum.Enum):
    FilePath = "file_path"
    Dll = "dll"
    RegistryKey = "registry_key"
    Url = "url"
    IpAddress = "ip_address"


_DRIVE_PREFIX = re.compile(r"^[A-Za-z]:\\")
_OCTET = re.compile(r"^\d{1,3}$")


def classify_argument(value) -> ResourceKind | None:
    """Resource kind of an argument value, or None for non-resources.

    Only strings classify.  Precedence: Dll, RegistryKey, Url, IpAddress,
    FilePath — so "C:\\x\\a.dll" is a Dll, not a FilePath.
    """
    if not isinstance(value, str) or not value:
        return None
    if value.lower().endswith(".dll"):
        return ResourceKind.Dll
    if value.startswith("HKEY_"):
        return ResourceKind.RegistryKey
    if value.startswith("http"):
        return ResourceKind.Url
    if _is_ipv4(value):
        return ResourceKind.IpAddress
    if _DRIVE_PREFIX.match(value):
        return ResourceKind.FilePath
    return None


def _is_ipv4(value: str) -> bool:
    parts = value.split(".")
    if len(parts) != 4:
        return False
    for p in parts:
        if not _OCTET.match(p) or int(p) > 255:
            return False
    return True


def substrings(value: str, kind: ResourceKind) -> list[str]:
    """Hierarchical substring chain for a classified resource string.

    Backslash-separated resources yield cumulative prefixes; URLs yield
    cumulative hostname suffixes (shortest first); IPs yield cumulative
    octet prefixes (shortest first).
    """
    if not value:
        raise EmptyResource("empty resource string")
    if kind in (ResourceKind.FilePath, ResourceKind.Dll, ResourceKind.RegistryKey):
        parts = [p for p in value.split("\\") if p]
        chain = ["\\".join(parts[: i + 1]) for i in range(len(parts))]
    elif kind is ResourceKind.Url:
        host = _hostname(value)
        labels = [p for p in host.split(".") if p]
        chain = [".".join(labels[len(labels) - i - 1:]) for i in range(len(labels))]
    else:  # IpAddress
        parts = value.split(".")
        chain = [".".join(parts[: i + 1]) for i in range(len(parts))]
    if not chain:
        raise EmptyResource(f"no substrings derivable from {value!r}")
    return chain


def _hostname(url: str) -> str:
    rest = url.split("://", 1)[1] if "://" in url else url
    rest = rest.split("/", 1)[0]
    return rest.split(":", 1)[0]


def feature_hash(items, n_bins: int, h, xi) -> np.ndarray:
    """Signed bin counts: bins[i-1] = sum of xi(s) over s with h(s) = i.

    ``h`` maps a string into 1..n_bins and ``xi`` into {-1, +1}; both are
    injectable so stipulated hash outputs can be tested directly.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    bins = np.zeros(n_bins, dtype=np.int64)
    for s in items:
        bins[h(s) - 1] += xi(s)
    return bins


@functools.lru_cache(maxsize=65536)
def _hash64(s: str, seed: int) -> int:
    digest = hashlib.blake2b(
        s.encode("utf-8"), digest_size=8,
        key=int(seed).to_bytes(8, "little", signed=False),
    ).digest()
    return int.from_bytes(digest, "little")


def hash_functions(n_bins: int, seed: int = DEFAULT_HASH_SEED):
    """Production (h, xi): a keyed 64-bit hash split into bin index and sign."""

    def h(s: str) -> int:
        return (_hash64(s, seed) % n_bins) + 1

    def xi(s: str) -> int:
        return 1 if (_hash64(s, seed) >> 63) == 0 else -1

    return h, xi


def hash_resource(value: str, kind: ResourceKind, n_bins: int,
                  seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    h, xi = hash_functions(n_bins, seed)
    return feature_hash(substrings(value, kind), n_bins, h, xi)


def embed_call_arguments(call, n_bins: int = DEFAULT_BINS,
                         seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """Sum of hashed substring vectors over all resource-like arguments.

    Non-resource arguments contribute nothing; a call with no resources
    maps to the zero vector.  Hashing is additive, so multiple resources
    aggregate by plain vector sum.
    """
    total = np.zeros(n_bins, dtype=np.float64)
    for _, value in call.arguments:
        kind = classify_argument(value)
        if kind is None:
            continue
        total += hash_resource(value, kind, n_bins, seed)
    return total
