"""Cyclic patterns: byte sequences whose fixed-width windows are all distinct.

Feeding such a pattern to a crashing target lets a register or stack value
observed at the fault be mapped straight back to the input offset that
produced it.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterator

from ..errors import CapacityError, NotInPattern

DEFAULT_ALPHABET = b"abcdefghijklmnopqrstuvwxyz"
DEFAULT_ORDER = 4


def _de_bruijn(alphabet: bytes, order: int) -> Iterator[int]:
    """Standard Lyndon-word construction of the de Bruijn sequence B(k, order)."""
    k = len(alphabet)
    a = [0] * (k * order)

    def db(t: int, p: int) -> Iterator[int]:
        if t > order:
            if order % p == 0:
                for j in range(1, p + 1):
                    yield alphabet[a[j]]
        else:
            a[t] = a[t - p]
            yield from db(t + 1, p)
            for j in range(a[t - p] + 1, k):
                a[t] = j
                yield from db(t + 1, t)

    return db(1, 1)


def capacity(order: int = DEFAULT_ORDER, alphabet: bytes = DEFAULT_ALPHABET) -> int:
    return len(alphabet) ** order


@lru_cache(maxsize=8)
def _full_pattern(order: int, alphabet: bytes) -> bytes:
    return bytes(_de_bruijn(alphabet, order))


def cyclic(length: int, order: int = DEFAULT_ORDER, alphabet: bytes = DEFAULT_ALPHABET) -> bytes:
    """First ``length`` bytes of the pattern; every ``order``-wide window is unique."""
    if length < 0:
        raise ValueError("length must be non-negative")
    cap = capacity(order, alphabet)
    if length > cap:
        raise CapacityError(f"length {length} exceeds pattern capacity {cap}")
    if length == 0:
        return b""
    return _full_pattern(order, alphabet)[:length]


def cyclic_find(window: bytes, order: int = DEFAULT_ORDER, alphabet: bytes = DEFAULT_ALPHABET) -> int:
    """Offset at which ``window`` (exactly ``order`` bytes) occurs in the pattern."""
    if len(window) != order:
        raise ValueError(f"window must be exactly {order} bytes, got {len(window)}")
    if any(b not in alphabet for b in window):
        raise NotInPattern(f"window {window!r} contains bytes outside the alphabet")
    offset = _full_pattern(order, alphabet).find(window)
    if offset < 0:
        raise NotInPattern(f"window {window!r} does not occur in the pattern")
    return offset
