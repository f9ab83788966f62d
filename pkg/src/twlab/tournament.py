"""Tournament sampling and the layer-inflation attack.

Two equivalent samplers are provided. The explicit one draws ``2**m``
candidates and plays the knockout match by match. The distribution sampler
computes the exact law of the winner given the seed, then draws once from
it. Because the candidates are iid, a layer-``l`` survivor is distributed as

    q_l(x) = q_{l-1}(x) * (2 Q_<(x) + Q_=(x))

where ``Q_<`` and ``Q_=`` are the ``q_{l-1}`` masses of tokens whose g-value
is smaller than, or equal to, that of ``x``. Deterministic tie bits do not
change this, since a match's tie bit is independent of its entrants. The
distribution sampler costs ``O(N m)`` per token instead of ``O(2**m)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._parallel import run_chunks
from .gsource import (DEFAULT_KEY, GSpec, RngStream, SecretKey, context_window,
                      derive_seed, g_value, tie_break_bit)
from .langmodel import TokenDistribution, next_distribution, sample_index

MAX_EXPLICIT_M = 30
MAX_ATTACK_LAYERS = 20


@dataclass(frozen=True)
class TournamentConfig:
    """Watermark parameters.

    ``m`` may exceed 30 only with the distribution sampler; the explicit
    sampler needs ``2**m`` candidates in memory.
    """

    m: int = 30
    gspec: GSpec = field(default_factory=GSpec)
    H: int = 4
    key: SecretKey = DEFAULT_KEY

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 0:
            raise ValueError("m: layer count must be a non-negative integer")
        if int(self.H) != self.H or self.H < 1:
            raise ValueError("H: context window must be a positive integer")
        if not isinstance(self.gspec, GSpec):
            raise TypeError("gspec: expected a GSpec")
        if not isinstance(self.key, SecretKey):
            raise TypeError("key: expected a SecretKey")

    def with_m(self, m):
        return TournamentConfig(m, self.gspec, self.H, self.key)


@dataclass(frozen=True)
class AttackConfig:
    n_attack_layers: int
    base: TournamentConfig = field(default_factory=TournamentConfig)
    recount: bool = True

    def __post_init__(self):
        if int(self.n_attack_layers) != self.n_attack_layers or not (
                1 <= self.n_attack_layers <= MAX_ATTACK_LAYERS):
            raise ValueError(f"n_attack_layers: must be in 1..{MAX_ATTACK_LAYERS}")


@dataclass(frozen=True, eq=False)
class WatermarkedText:
    tokens: np.ndarray
    seeds: np.ndarray

    def __len__(self):
        return len(self.tokens)


def knockout(entrants, score, tie):
    """Play a knockout over ``entrants`` (length a power of two).

    Match ``j`` of layer ``l`` pairs entrants ``2j`` and ``2j+1``; the one with
    the larger ``score(l, token)`` advances and ``tie(l, j)`` picks the second
    entrant when it returns 1.
    """
    cur = list(entrants)
    if len(cur) & (len(cur) - 1):
        raise ValueError("entrants: count must be a power of two")
    layer = 1
    while len(cur) > 1:
        nxt = []
        for j in range(len(cur) // 2):
            a, b = cur[2 * j], cur[2 * j + 1]
            sa, sb = score(layer, a), score(layer, b)
            if sa > sb:
                nxt.append(a)
            elif sb > sa:
                nxt.append(b)
            else:
                nxt.append(b if tie(layer, j) else a)
        cur = nxt
        layer += 1
    return cur[0]


def _probs(dist):
    return dist.probs if isinstance(dist, TokenDistribution) else np.asarray(dist, dtype=float)


def winner_distribution(dist, g_table):
    """Exact winner law for fixed g-values.

    Parameters
    ----------
    dist : TokenDistribution or array
    g_table : array of shape (m, N)
        ``g_table[l - 1, x]`` is the layer-``l`` g-value of token ``x``.

    Returns
    -------
    q : ndarray
        Winner distribution after ``m`` layers.
    coll : ndarray
        Collision probability of each layer's entrant distribution.
    """
    q = np.array(_probs(dist), dtype=float)
    g_table = np.atleast_2d(np.asarray(g_table, dtype=float))
    coll = np.empty(len(g_table))
    for i, g in enumerate(g_table):
        coll[i] = q @ q
        less = (g[None, :] < g[:, None]) @ q
        same = (g[None, :] == g[:, None]) @ q
        q = q * (2.0 * less + same)
        q /= q.sum()
    return q, coll


class _Work:
    def __init__(self, N, m):
        self.act = np.empty(N, np.int64)
        self.w = np.empty(N)
        self.scratch = np.empty(N)
        self.fac = np.empty(N)
        self.order = np.empty(N, np.int64)
        self.bucket = np.empty(N, np.int64)
        self.count = np.empty(N + 1, np.int64)
        self.coll = np.empty(max(m, 1))


def _token_mix(N):
    # one extra entry for the padding token
    return K.token_mix(N + 1)


def winner_distribution_seeded(dist, seed, cfg):
    """Exact winner law under the keyed g-values of ``seed``."""
    p = np.ascontiguousarray(_probs(dist), dtype=float)
    N = p.size
    wk = _Work(N, cfg.m)
    n = K.winner_dist(p, np.uint64(seed), cfg.m, cfg.gspec.code, cfg.gspec.p,
                      _token_mix(N), wk.act, wk.w, wk.scratch, wk.fac,
                      wk.order, wk.bucket, wk.count, wk.coll)
    q = np.zeros(N)
    q[wk.act[:n]] = wk.w[:n]
    return q, wk.coll[:cfg.m].copy()


def _explicit_sample(p, seed, cfg, rng):
    m = cfg.m
    if m > MAX_EXPLICIT_M:
        raise ValueError(f"m: explicit tournament supports m <= {MAX_EXPLICIT_M}")
    n = 1 << m
    j = np.arange(rng.counter, rng.counter + n, dtype=np.uint64)
    bits = K.hash_many(np.full(n, np.uint64(rng.state ^ K._DRAW)), j)
    rng.counter += n
    cdf = np.cumsum(p)
    us = (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    cand = np.searchsorted(cdf, us * cdf[-1], side="right")
    last = int(np.flatnonzero(p > 0)[-1])
    cand = np.minimum(cand, last)
    cache = {}

    def score(layer, token):
        k = (layer, token)
        if k not in cache:
            cache[k] = g_value(seed, layer, int(token), cfg.gspec)
        return cache[k]

    return int(knockout(cand, score, lambda layer, j: tie_break_bit(seed, layer, j)))


def tournament_sample(dist, seed, cfg, rng, method="distribution"):
    """Draw one watermarked token.

    Parameters
    ----------
    dist : TokenDistribution
    seed : int
        Seed derived from the context window.
    cfg : TournamentConfig
    rng : RngStream
        Consumed from its current counter.
    method : {"distribution", "explicit"}
        ``explicit`` draws ``2**m`` candidates and plays every match;
        ``distribution`` samples the exact winner law directly.
    """
    p = np.ascontiguousarray(_probs(dist), dtype=float)
    if cfg.m == 0:
        return sample_index(p, rng.next_uniform())
    if method == "explicit":
        return _explicit_sample(p, seed, cfg, rng)
    if method != "distribution":
        raise ValueError(f"method: unknown sampler {method!r}")
    q, _ = winner_distribution_seeded(p, seed, cfg)
    return sample_index(q, rng.next_uniform())


def generate_text(model, cfg, T, rng, method="distribution", prompt_len=0):
    """Generate one watermarked text.

    Position ``t`` consumes the stream ``rng.child(t)``, so the result matches
    text ``i`` of :func:`generate_texts` when ``rng`` is the batch stream's
    ``child(i)``. The first ``prompt_len`` tokens are plain samples that only
    serve as context; the returned text includes them.
    """
    if T < 1:
        raise ValueError("T: text length must be >= 1")
    if method == "distribution":
        batch = _generate(model, cfg, T, np.array([rng.state], np.uint64),
                          prompt_len=prompt_len, threads=1)
        return WatermarkedText(batch.tokens[0], batch.seeds[0])
    pad = model.N
    plain = cfg.with_m(0)
    tokens, seeds = [], []
    for t in range(prompt_len + T):
        seed = derive_seed(context_window(tokens, t, cfg.H, pad), cfg.key)
        dist = next_distribution(model, tokens[-1] if tokens else None)
        use = cfg if t >= prompt_len else plain
        tokens.append(tournament_sample(dist, seed, use, rng.child(t), method))
        seeds.append(seed)
    return WatermarkedText(np.array(tokens, np.int64), np.array(seeds, np.uint64))


@dataclass(eq=False)
class TextBatch:
    """Texts generated together.

    ``tokens`` has shape ``(n, prompt_len + T)``. ``coll_sum[i, l]`` sums,
    over the watermarked positions of text ``i``, the collision probability
    of the layer-``l + 1`` entrant distribution; ``coll_pos`` keeps the
    per-position values when requested.
    """

    tokens: np.ndarray
    seeds: np.ndarray
    coll_sum: np.ndarray
    coll_pos: np.ndarray = None
    m: int = 0
    prompt_len: int = 0

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def T(self):
        return self.tokens.shape[1] - self.prompt_len

    def text(self, i):
        return WatermarkedText(self.tokens[i], self.seeds[i])


def stream_states(rng, n, offset=0):
    """States of ``rng.child(offset + i)`` for ``i < n``."""
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    return K.hash_many(np.full(n, np.uint64(rng.state)), idx)


def _generate(model, cfg, T, states, threads=None, record_positions=False,
              prompt_len=0, key_states=None):
    n = len(states)
    m = cfg.m
    P = int(prompt_len)
    if P < 0:
        raise ValueError("prompt_len: must be >= 0")
    tokens = np.zeros((n, P + T), np.int64)
    seeds = np.zeros((n, P + T), np.uint64)
    coll_sum = np.zeros((n, max(m, 1)))
    coll_pos = np.zeros((n, T, max(m, 1)) if record_positions else (1, 1, 1))
    tm = _token_mix(model.N)
    if key_states is None:
        key_states = np.full(n, np.uint64(cfg.key.state))

    def work(lo, hi):
        K.generate_block(model.rows, model.kind_code, model.init_row, lo, hi, P, T, m,
                         cfg.H, model.N, key_states, cfg.gspec.code, cfg.gspec.p, tm,
                         states, tokens, seeds, coll_sum, coll_pos, record_positions)

    run_chunks(work, n, threads)
    return TextBatch(tokens, seeds, coll_sum[:, :m],
                     coll_pos[:, :, :m] if record_positions else None, m, P)


def generate_texts(model, cfg, T, n_texts, rng, threads=None, record_positions=False,
                   offset=0, prompt_len=0, rekey=False):
    """Generate a batch of texts.

    Text ``i`` uses the stream ``rng.child(offset + i)``, so adding texts
    never changes earlier ones. With ``rekey`` every text gets its own key
    derived from that stream, which makes texts exactly independent; such
    texts cannot be detected with ``cfg.key``.
    """
    if T < 1:
        raise ValueError("T: text length must be >= 1")
    states = stream_states(rng, n_texts, offset)
    key_states = None
    if rekey:
        key_states = K.hash_many(states ^ np.uint64(cfg.key.state),
                                 np.full(n_texts, np.uint64(0x6B6579), np.uint64))
    return _generate(model, cfg, T, states, threads, record_positions, prompt_len,
                     key_states)


def attack_g(observed, token):
    """Attack score of ``token``: minus its number of occurrences in ``observed``."""
    count = sum(1 for x in observed if x == token)
    if count == 0:
        raise ValueError("token: must occur in the observed list")
    return -count


def make_blackbox(model, cfg, rng):
    """A watermarked generator that only reveals sampled tokens.

    Call ``c`` on a given context uses the fresh stream ``rng.child(c)``.
    """
    calls = {"n": 0}
    pad = model.N

    def blackbox(context):
        context = list(context)
        seed = derive_seed(context_window(context, len(context), cfg.H, pad), cfg.key)
        dist = next_distribution(model, context[-1] if context else None)
        c = calls["n"]
        calls["n"] += 1
        return tournament_sample(dist, seed, cfg, rng.child(c))

    return blackbox


def inflate_attack_sample(blackbox, context, attack, rng):
    """One attacked token.

    The black box is queried ``2**N`` times on ``context``. The answers play
    an ``N``-layer knockout in which the rarer token wins each match, so the
    result tends to be a token the watermark did not favour. Ties use the
    attacker's own coin ``tie_break_bit(rng.state, layer, match)``.
    """
    pool = [blackbox(context) for _ in range(1 << attack.n_attack_layers)]
    private = rng.state
    if attack.recount:
        return _knockout_recount(pool, private)
    return knockout(pool, lambda layer, x: attack_g(pool, x),
                    lambda layer, j: tie_break_bit(private, layer, j))


def _knockout_recount(pool, private):
    # counts are taken over the entrants of the current layer only
    cur = list(pool)
    layer = 1
    while len(cur) > 1:
        nxt = []
        for j in range(len(cur) // 2):
            a, b = cur[2 * j], cur[2 * j + 1]
            sa, sb = attack_g(cur, a), attack_g(cur, b)
            if sa > sb:
                nxt.append(a)
            elif sb > sa:
                nxt.append(b)
            else:
                nxt.append(b if tie_break_bit(private, layer, j) else a)
        cur = nxt
        layer += 1
    return cur[0]


def attack_texts(model, attack, T, n_texts, blackbox_rng, attacker_rng, threads=None,
                 prompt_len=0):
    """Generate attacked texts, shape ``(n_texts, prompt_len + T)``.

    Text ``i`` queries the black box with streams from
    ``blackbox_rng.child(i).child(t).child(c)`` and breaks ties with
    ``attacker_rng.child(i).child(t)``.
    """
    cfg = attack.base
    P = int(prompt_len)
    tokens = np.zeros((n_texts, P + T), np.int64)
    tm = _token_mix(model.N)
    bb = stream_states(blackbox_rng, n_texts)
    atk = stream_states(attacker_rng, n_texts)

    def work(lo, hi):
        K.attack_block(model.rows, model.kind_code, model.init_row, lo, hi, P, T, cfg.m,
                       cfg.H, model.N, np.uint64(cfg.key.state), cfg.gspec.code,
                       cfg.gspec.p, tm, bb, atk, attack.n_attack_layers,
                       attack.recount, tokens)

    run_chunks(work, n_texts, threads)
    return tokens
