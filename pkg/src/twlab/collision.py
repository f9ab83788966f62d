"""Collision probabilities of tournament layers.

``C_l`` is the expected collision probability of the layer-``l`` entrant
distribution, the expectation running over the keyed g-values of the
earlier layers. With this reading a layer-``l`` g-value of the final winner
has mean ``(3 - C_l) / 4`` under Bernoulli(0.5).
"""

from dataclasses import dataclass
import csv
import io
import itertools
import json
import math

import numpy as np
from sklearn.isotonic import isotonic_regression

from .gsource import GSpec
from .langmodel import TokenDistribution
from .tournament import generate_texts

EXACT_WORK_LIMIT = 5_000_000


class CapacityError(ValueError):
    """Raised when exact enumeration would be too large."""


def collision_probability(dist):
    """``sum_i p_i ** 2``."""
    p = dist.probs if isinstance(dist, TokenDistribution) else np.asarray(dist, dtype=float)
    return float(p @ p)


@dataclass(eq=False)
class CollisionProfile:
    """Collision probabilities per layer, optionally per position.

    ``C`` has shape ``(L,)`` for a per-layer profile or ``(T, L)`` when it is
    indexed by position. ``stderr`` has the same shape (or is ``None`` for
    exact values).
    """

    C: np.ndarray
    stderr: np.ndarray = None
    M: int = None

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        if self.C.ndim not in (1, 2):
            raise ValueError("C: expected a (L,) or (T, L) array")
        if np.any(self.C < -1e-12) or np.any(self.C > 1 + 1e-12):
            raise ValueError("C: entries must lie in [0, 1]")
        self.C = np.clip(self.C, 0.0, 1.0)
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, dtype=float)
            if self.stderr.shape != self.C.shape:
                raise ValueError("stderr: shape must match C")

    @property
    def n_layers(self):
        return self.C.shape[-1]

    @property
    def per_position(self):
        return self.C.ndim == 2

    def per_layer(self):
        """Collapse positions by averaging."""
        if not self.per_position:
            return self
        se = None
        if self.stderr is not None:
            se = np.sqrt((self.stderr ** 2).sum(axis=0)) / self.C.shape[0]
        return CollisionProfile(self.C.mean(axis=0), se, self.M)

    def truncate(self, m):
        if m > self.n_layers:
            raise ValueError(f"m: profile has only {self.n_layers} layers")
        se = None if self.stderr is None else self.stderr[..., :m]
        return CollisionProfile(self.C[..., :m], se, self.M if self.M and self.M <= m else None)

    def monotone(self):
        """Least-squares non-decreasing fit along layers (per position)."""
        rows = np.atleast_2d(self.C)
        fitted = np.vstack([isotonic_regression(r, increasing=True) for r in rows])
        fitted = np.clip(fitted, 0.0, 1.0)
        return CollisionProfile(fitted.reshape(self.C.shape), self.stderr, self.M)

    def rows(self):
        C = np.atleast_2d(self.C)
        se = None if self.stderr is None else np.atleast_2d(self.stderr)
        for t in range(C.shape[0]):
            for layer in range(C.shape[1]):
                yield ("all" if not self.per_position else t, layer + 1, C[t, layer],
                       "" if se is None else se[t, layer])

    def to_csv(self, fh=None):
        """Write ``t,layer,C,stderr`` rows; returns the text when ``fh`` is None."""
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "layer", "C", "stderr"])
        for t, layer, c, se in self.rows():
            w.writerow([t, layer, repr(float(c)), "" if se == "" else repr(float(se))])
        return buf.getvalue() if fh is None else None

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        per_pos = rows and rows[0]["t"] != "all"
        L = max(int(r["layer"]) for r in rows)
        T = max(int(r["t"]) for r in rows) + 1 if per_pos else 1
        C = np.zeros((T, L))
        se = np.zeros((T, L))
        has_se = all(r["stderr"] != "" for r in rows)
        for r in rows:
            t = int(r["t"]) if per_pos else 0
            C[t, int(r["layer"]) - 1] = float(r["C"])
            if has_se:
                se[t, int(r["layer"]) - 1] = float(r["stderr"])
        if not per_pos:
            C, se = C[0], se[0]
        return cls(C, se if has_se else None)

    def to_json(self):
        return json.dumps({"C": self.C.tolist(),
                           "stderr": None if self.stderr is None else self.stderr.tolist(),
                           "M": self.M})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["C"]), None if d["stderr"] is None else np.array(d["stderr"]),
                   d.get("M"))


@dataclass(eq=False)
class ChatEstimate:
    """Per-layer collision estimates fitted on watermarked training texts."""

    chat: np.ndarray
    n_train: int
    stderr: np.ndarray = None

    def __post_init__(self):
        self.chat = np.clip(np.asarray(self.chat, dtype=float), 0.0, 1.0)

    def __len__(self):
        return len(self.chat)

    def truncate(self, m):
        se = None if self.stderr is None else self.stderr[:m]
        return ChatEstimate(self.chat[:m], self.n_train, se)


def _bernoulli_expand(q, p):
    k = q.size
    bits = ((np.arange(1 << k)[:, None] >> np.arange(k)[None, :]) & 1).astype(float)
    weight = p ** bits.sum(1) * (1 - p) ** (k - bits.sum(1))
    s1 = bits @ q
    fac = bits * (2.0 - s1)[:, None] + (1 - bits) * (1.0 - s1)[:, None]
    return q[None, :] * fac, weight


def _uniform_expand(q):
    k = q.size
    perms = np.array(list(itertools.permutations(range(k))))
    # rank[r, x] is the position of token x in ordering r (ascending g)
    rank = np.argsort(perms, axis=1)
    less = (rank[:, None, :] < rank[:, :, None]) @ q
    return q[None, :] * (2.0 * less + q[None, :]), np.full(len(perms), 1.0 / len(perms))


def layer_collisions_exact(dist, m, gspec, work_limit=EXACT_WORK_LIMIT):
    """Exact ``C_1..C_m`` by enumerating g-value assignments.

    Bernoulli layers enumerate all ``2**k`` assignments over the ``k``
    tokens with positive mass; uniform layers enumerate all ``k!`` orderings
    (only the ranks of continuous g-values matter). Identical intermediate
    distributions are merged.

    Raises
    ------
    CapacityError
        If the enumeration exceeds ``work_limit`` distribution updates. Use
        :func:`layer_collisions_mc` instead.
    """
    p = dist.probs if isinstance(dist, TokenDistribution) else np.asarray(dist, dtype=float)
    if m < 1:
        raise ValueError("m: need at least one layer")
    states = {p.tobytes(): (p.copy(), 1.0)}
    out = [float(p @ p)]
    for layer in range(2, m + 1):
        per_state = [int((q > 0).sum()) for q, _ in states.values()]
        size = sum((1 << k) if gspec.is_bernoulli else math.factorial(k) for k in per_state)
        last = layer == m
        # the final layer is only summed, never stored, so it gets extra room
        if size > (work_limit * 8 if last else work_limit):
            raise CapacityError(
                f"exact enumeration needs {size} updates at layer {layer}; "
                "use layer_collisions_mc for this model")
        nxt = {}
        total = 0.0
        for q, w in states.values():
            support = q > 0
            qs = q[support]
            if gspec.is_bernoulli:
                new, weight = _bernoulli_expand(qs, gspec.p)
            else:
                new, weight = _uniform_expand(qs)
            new = new / new.sum(axis=1, keepdims=True)
            if last:
                total += w * float(weight @ (new * new).sum(axis=1))
                continue
            for row, wt in zip(new, weight):
                if wt == 0:
                    continue
                full = np.zeros_like(q)
                full[support] = row
                key = np.round(full, 14).tobytes()
                if key in nxt:
                    nxt[key] = (nxt[key][0], nxt[key][1] + w * wt)
                else:
                    nxt[key] = (full, w * wt)
        if last:
            out.append(total)
        else:
            out.append(sum(w * float(q @ q) for q, w in nxt.values()))
            states = nxt
    return np.array(out)


def profile_from_batch(batch, per_position=False):
    """Collision profile measured during generation of ``batch``.

    Each token's realized entrant collision ``sum_x q(x)**2`` is an unbiased
    draw of ``C_l``; texts are independent, so standard errors come from the
    spread of per-text averages.
    """
    n = batch.n
    if per_position:
        if batch.coll_pos is None:
            raise ValueError("batch: generated without per-position collisions")
        C = batch.coll_pos.mean(axis=0)
        se = batch.coll_pos.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(C)
        return CollisionProfile(C, se)
    per_text = batch.coll_sum / batch.T
    C = per_text.mean(axis=0)
    se = per_text.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(C)
    return CollisionProfile(C, se)


def layer_collisions_mc(model, cfg, n_texts, T, rng, threads=None, per_position=False,
                        rekey=True, prompt_len=0):
    """Monte Carlo collision profile of watermarked generation.

    Parameters
    ----------
    model : SequenceModel
    cfg : TournamentConfig
        ``cfg.m`` is the number of layers profiled.
    n_texts, T : int
    rng : RngStream
    per_position : bool
        Keep the ``(T, m)`` matrix instead of averaging over positions.
    rekey : bool
        Give every text its own key. ``C_l`` is an expectation over the
        key; with one shared key, texts that repeat a context window reuse
        the same g-values and the estimate conditions on that key.
    """
    if n_texts < 100:
        raise ValueError("n_texts: need at least 100 texts")
    batch = generate_texts(model, cfg, T, n_texts, rng, threads, per_position,
                           prompt_len=prompt_len, rekey=rekey)
    return profile_from_batch(batch, per_position)


def chat_from_means(means, gspec):
    if gspec.is_bernoulli:
        p = gspec.p
        return 1.0 - (np.asarray(means) - p) / (p * (1.0 - p))
    return 4.0 - 6.0 * np.asarray(means)


def estimate_chat(g_matrices, gspec):
    """Moment-matched per-layer collision estimate.

    Inverts the watermarked g-value mean: ``3 - 4 mean`` for
    Bernoulli(0.5), ``1 - (mean - p) / (p (1 - p))`` for Bernoulli(p) and
    ``4 - 6 mean`` for uniform, clamped to ``[0, 1]``.

    Parameters
    ----------
    g_matrices : sequence of GMatrix or array of shape (n, T, m)
    gspec : GSpec
    """
    if isinstance(g_matrices, np.ndarray):
        arr = g_matrices
    else:
        if len(g_matrices) == 0:
            raise ValueError("g_matrices: need at least one training text")
        arr = np.stack([getattr(g, "values", g) for g in g_matrices])
    if arr.size == 0:
        raise ValueError("g_matrices: need at least one training text")
    if arr.ndim != 3:
        raise ValueError("g_matrices: expected shape (n, T, m)")
    return estimate_chat_from_sums(arr.sum(axis=1), arr.shape[1], gspec)


def estimate_chat_from_sums(gsum, T, gspec, min_texts=100):
    """Same as :func:`estimate_chat` from per-text layer sums ``gsum`` (n, m)."""
    gsum = np.asarray(gsum, dtype=float)
    n = gsum.shape[0]
    if n == 0:
        raise ValueError("gsum: need at least one training text")
    if n < min_texts:
        raise ValueError(f"n_train: need at least {min_texts} training texts")
    per_text = gsum / T
    means = per_text.mean(axis=0)
    scale = 4.0 if gspec == GSpec.bernoulli(0.5) else (
        1.0 / (gspec.p * (1 - gspec.p)) if gspec.is_bernoulli else 6.0)
    se = scale * per_text.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else None
    return ChatEstimate(chat_from_means(means, gspec), n, se)


class WatermarkedGDist:
    """Law of a watermarked g-value at a layer with collision ``C``."""

    def __init__(self, gspec, C):
        if not 0.0 <= C <= 1.0:
            raise ValueError("C: must lie in [0, 1]")
        self.gspec = gspec
        self.C = float(C)

    @property
    def p_one(self):
        p = self.gspec.p
        return p + p * (1 - p) * (1 - self.C)

    def pmf(self, g):
        if not self.gspec.is_bernoulli:
            raise TypeError("uniform g-values have a density, use pdf")
        g = np.asarray(g)
        return np.where(g == 1, self.p_one, np.where(g == 0, 1 - self.p_one, 0.0))

    def pdf(self, g):
        if self.gspec.is_bernoulli:
            raise TypeError("bernoulli g-values have a mass function, use pmf")
        g = np.asarray(g, dtype=float)
        inside = (g >= 0) & (g <= 1)
        return np.where(inside, self.C + 2 * (1 - self.C) * g, 0.0)

    def cdf(self, g):
        g = np.asarray(g, dtype=float)
        if self.gspec.is_bernoulli:
            return np.where(g < 0, 0.0, np.where(g < 1, 1 - self.p_one, 1.0))
        x = np.clip(g, 0.0, 1.0)
        return self.C * x + (1 - self.C) * x * x

    @property
    def mean(self):
        if self.gspec.is_bernoulli:
            return self.p_one
        return (4.0 - self.C) / 6.0

    @property
    def var(self):
        if self.gspec.is_bernoulli:
            return self.p_one * (1 - self.p_one)
        return (3.0 - self.C) / 6.0 - self.mean ** 2


def watermarked_g_dist(gspec, C):
    """Distribution of a watermarked g-value (mass function or density)."""
    return WatermarkedGDist(gspec, C)


def detect_M(profile, delta=1e-6):
    """First layer (1-based) whose collision is at least ``1 - delta`` at every position."""
    if not 0.0 < delta < 0.5:
        raise ValueError("delta: must lie in (0, 0.5)")
    C = profile.C if isinstance(profile, CollisionProfile) else np.asarray(profile, dtype=float)
    worst = np.atleast_2d(C).min(axis=0)
    hits = np.flatnonzero(worst >= 1.0 - delta)
    return int(hits[0]) + 1 if hits.size else None
