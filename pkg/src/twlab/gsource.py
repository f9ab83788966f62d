"""Keyed pseudorandom seeds and g-values.

Everything random in the lab flows through one 64-bit mixing construction.
A hash state absorbs 64-bit words one at a time::

    absorb(h, w) = mix64(h ^ mix64(w + GOLDEN))

where ``mix64`` is the splitmix64 finalizer. Each use starts from a
distinct domain tag, so seeds, g-values, tie bits and sampling draws are
computed from disjoint hash families. The file ``data/gsource_vectors.txt``
freezes reference outputs for cross-platform checks.
"""

from dataclasses import dataclass
from importlib import resources
import re
import secrets

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

TAG_SEED = int.from_bytes(b"twl:seed", "big")
TAG_G = int.from_bytes(b"twl:gval", "big")
TAG_TIE = int.from_bytes(b"twl:tieb", "big")
TAG_RNG = int.from_bytes(b"twl:rngs", "big")
TAG_DRAW = int.from_bytes(b"twl:draw", "big")

FRAC_SCALE = 2.0 ** -53


def mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def absorb(h, w):
    return mix64(h ^ mix64((w + GOLDEN) & MASK64))


def hash_words(tag, words):
    h = mix64(tag)
    for w in words:
        h = absorb(h, int(w) & MASK64)
    return h


def to_unit(h):
    """Map a 64-bit hash to [0, 1) using its top 53 bits."""
    return (h >> 11) * FRAC_SCALE


@dataclass(frozen=True)
class SecretKey:
    """128-bit watermarking key."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < (1 << 128):
            raise ValueError("key: must be a 128-bit unsigned integer")

    @classmethod
    def from_hex(cls, text):
        text = text.strip().lower()
        if text.startswith("0x"):
            text = text[2:]
        if not re.fullmatch(r"[0-9a-f]{1,32}", text):
            raise ValueError("key: expected up to 32 hex digits")
        return cls(int(text, 16))

    @classmethod
    def generate(cls):
        return cls(secrets.randbits(128))

    @property
    def hex(self):
        return f"{self.value:032x}"

    @property
    def words(self):
        return (self.value >> 64, self.value & MASK64)

    @property
    def state(self):
        """Hash state after absorbing the seed tag and the key."""
        hi, lo = self.words
        return absorb(absorb(mix64(TAG_SEED), hi), lo)


@dataclass(frozen=True)
class GSpec:
    """Distribution of g-values: ``bernoulli`` with parameter ``p`` or ``uniform``."""

    family: str = "bernoulli"
    p: float = 0.5

    def __post_init__(self):
        if self.family not in ("bernoulli", "uniform"):
            raise ValueError(f"gspec.family: unknown family {self.family!r}")
        if self.family == "bernoulli" and not 0.0 < self.p < 1.0:
            raise ValueError("gspec.p: must lie in (0, 1)")

    @classmethod
    def bernoulli(cls, p=0.5):
        return cls("bernoulli", float(p))

    @classmethod
    def uniform(cls):
        return cls("uniform", 0.5)

    @classmethod
    def parse(cls, text):
        """Parse ``"uniform"``, ``"bernoulli"`` or ``"bernoulli(0.3)"``."""
        text = text.strip().lower()
        if text == "uniform":
            return cls.uniform()
        m = re.fullmatch(r"bernoulli(?:\(([0-9.eE+-]+)\))?", text)
        if m is None:
            raise ValueError(f"gspec: cannot parse {text!r}")
        return cls.bernoulli(float(m.group(1)) if m.group(1) else 0.5)

    def __str__(self):
        if self.family == "uniform":
            return "uniform"
        return f"bernoulli({self.p:g})"

    @property
    def code(self):
        return 0 if self.family == "bernoulli" else 1

    @property
    def is_bernoulli(self):
        return self.family == "bernoulli"

    @property
    def mean(self):
        return self.p if self.is_bernoulli else 0.5

    @property
    def var(self):
        return self.p * (1.0 - self.p) if self.is_bernoulli else 1.0 / 12.0

    def pmf(self, g):
        if not self.is_bernoulli:
            raise TypeError("uniform g-values have a density, use pdf")
        return np.where(np.asarray(g) == 1, self.p, 1.0 - self.p)

    def pdf(self, g):
        if self.is_bernoulli:
            raise TypeError("bernoulli g-values have a mass function, use pmf")
        g = np.asarray(g, dtype=float)
        return np.where((g >= 0) & (g <= 1), 1.0, 0.0)

    def cdf(self, g):
        g = np.asarray(g, dtype=float)
        if self.is_bernoulli:
            return np.where(g < 0, 0.0, np.where(g < 1, 1.0 - self.p, 1.0))
        return np.clip(g, 0.0, 1.0)

    def icdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.is_bernoulli:
            return (u < self.p).astype(float)
        return u


def context_window(tokens, t, H, pad):
    """The ``H`` tokens before position ``t``, left padded with ``pad``."""
    start = t - H
    head = [pad] * max(0, -start)
    return tuple(head) + tuple(int(x) for x in tokens[max(0, start):t])


def derive_seed(ctx, key):
    """Seed for the next token given its context window.

    Parameters
    ----------
    ctx : sequence of int
        The window of the ``H`` preceding token ids, padding included.
    key : SecretKey

    Returns
    -------
    int
        64-bit seed. It depends on the absolute position only through ``ctx``.
    """
    h = key.state
    for w in ctx:
        h = absorb(h, int(w))
    return h


def g_hash(seed, layer, token):
    return absorb(absorb(absorb(mix64(TAG_G), seed), layer), token)


def g_value(seed, layer, token, spec):
    """g-value of ``token`` at tournament ``layer`` under ``seed``.

    The uniform fraction ``u`` of the hash is pushed through the inverse CDF
    of ``spec``: bernoulli gives ``1`` iff ``u < p`` and uniform gives ``u``.
    """
    if layer < 1:
        raise ValueError("layer: must be >= 1")
    u = to_unit(g_hash(seed, layer, token))
    if spec.is_bernoulli:
        return 1 if u < spec.p else 0
    return u


def tie_break_bit(seed, layer, match_index):
    """Deterministic fair coin for a tied match."""
    return absorb(absorb(absorb(mix64(TAG_TIE), seed), layer), match_index) >> 63


class RngStream:
    """Counter-based stream of uniforms.

    A stream is a single 64-bit state. ``child(i)`` derives an independent
    sub-stream, and ``uniform(j)`` is the ``j``-th draw of this stream. The
    convenience method ``next_uniform`` walks an internal counter.
    """

    def __init__(self, state, counter=0):
        self.state = int(state) & MASK64
        self.counter = counter

    @classmethod
    def from_seed(cls, master_seed):
        return cls(absorb(mix64(TAG_RNG), int(master_seed) & MASK64))

    def child(self, index):
        return RngStream(absorb(self.state, int(index) & MASK64))

    def bits(self, j):
        return absorb(self.state ^ TAG_DRAW, int(j) & MASK64)

    def uniform(self, j):
        return to_unit(self.bits(j))

    def next_uniform(self):
        u = self.uniform(self.counter)
        self.counter += 1
        return u

    def __repr__(self):
        return f"RngStream(0x{self.state:016x}, counter={self.counter})"


# Stream labels used by the harness.
STREAM_WATERMARKED = 1
STREAM_PLAIN = 2
STREAM_TRAIN = 3
STREAM_ATTACK = 4
STREAM_ATTACKER = 5


def _vector_records():
    keys = [SecretKey(0), SecretKey(0x000102030405060708090A0B0C0D0E0F),
            SecretKey((1 << 128) - 1)]
    ctxs = [(0, 0, 0, 0), (1000, 1000, 1000, 1000), (1, 2, 3, 4),
            (999, 17, 4, 1000), (5,)]
    for key in keys:
        for ctx in ctxs:
            seed = derive_seed(ctx, key)
            yield ("seed", [key.hex, ",".join(f"{c:x}" for c in ctx)],
                   f"{seed:016x}")
            for layer, token in [(1, 0), (1, 7), (2, 7), (30, 999), (128, 3)]:
                yield ("g", [f"{seed:016x}", f"{layer:x}", f"{token:x}"],
                       f"{g_hash(seed, layer, token):016x}")
            for layer, match in [(1, 0), (2, 0), (5, 17)]:
                yield ("tie", [f"{seed:016x}", f"{layer:x}", f"{match:x}"],
                       str(tie_break_bit(seed, layer, match)))
    for master in [0, 1, 12345, MASK64]:
        s = RngStream.from_seed(master)
        yield ("stream", [f"{master:x}"], f"{s.state:016x}")
        for i, j in [(0, 0), (1, 0), (1, 1), (7, 1023)]:
            yield ("draw", [f"{s.state:016x}", f"{i:x}", f"{j:x}"],
                   f"{s.child(i).bits(j):016x}")


def vector_lines():
    """Reference records, one ``kind hex-inputs -> hex-output`` line each."""
    return [f"{kind} {' '.join(ins)} -> {out}" for kind, ins, out in _vector_records()]


def shipped_test_vectors():
    text = resources.files("twlab").joinpath("data/gsource_vectors.txt").read_text()
    return [ln for ln in text.splitlines() if ln and not ln.startswith("#")]


def check_test_vectors(lines=None):
    """Recompute every record; return the list of mismatching lines."""
    lines = shipped_test_vectors() if lines is None else lines
    bad = []
    for line in lines:
        lhs, out = line.split(" -> ")
        kind, *ins = lhs.split(" ")
        if kind == "seed":
            key = SecretKey.from_hex(ins[0])
            ctx = [int(c, 16) for c in ins[1].split(",")]
            got = f"{derive_seed(ctx, key):016x}"
        elif kind == "g":
            got = f"{g_hash(*(int(x, 16) for x in ins)):016x}"
        elif kind == "tie":
            got = str(tie_break_bit(*(int(x, 16) for x in ins)))
        elif kind == "stream":
            got = f"{RngStream.from_seed(int(ins[0], 16)).state:016x}"
        elif kind == "draw":
            state, i, j = (int(x, 16) for x in ins)
            got = f"{RngStream(state).child(i).bits(j):016x}"
        else:
            raise ValueError(f"unknown test vector kind {kind!r}")
        if got != out:
            bad.append(line)
    return bad


def key_from_config(value):
    if isinstance(value, SecretKey):
        return value
    if value is None:
        return DEFAULT_KEY
    return SecretKey.from_hex(str(value))


DEFAULT_KEY = SecretKey(0x5EED5EED0123456789ABCDEF00C0FFEE)
