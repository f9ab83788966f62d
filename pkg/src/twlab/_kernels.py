"""Compiled inner loops.

The hash here must agree bit for bit with ``gsource``; a test checks that.
Every kernel processes a half-open range of text indices and writes only
to those rows, so callers may split work across threads freely.
"""

import numpy as np
from numba import njit

from . import gsource as gs

_GOLDEN = np.uint64(gs.GOLDEN)
_M1 = np.uint64(gs.MIX1)
_M2 = np.uint64(gs.MIX2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S63 = np.uint64(63)
_G0 = np.uint64(gs.mix64(gs.TAG_G))
_TIE0 = np.uint64(gs.mix64(gs.TAG_TIE))
_DRAW = np.uint64(gs.TAG_DRAW)
_SCALE = gs.FRAC_SCALE
# weights below this are dropped; keeping them would only produce subnormals
TINY = 1e-290


@njit(inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(inline="always")
def absorb(h, w):
    return mix64(h ^ mix64(w + _GOLDEN))


@njit(inline="always")
def unit(h):
    return np.float64(h >> _S11) * _SCALE


@njit(inline="always")
def draw(state, j):
    return absorb(state ^ _DRAW, np.uint64(j))


@njit(inline="always")
def child(state, i):
    return absorb(state, np.uint64(i))


@njit(inline="always")
def tie_bit(seed, layer, match):
    h = absorb(absorb(absorb(_TIE0, seed), np.uint64(layer)), np.uint64(match))
    return h >> _S63


@njit(cache=True)
def token_mix(n):
    out = np.empty(n, np.uint64)
    for x in range(n):
        out[x] = mix64(np.uint64(x) + _GOLDEN)
    return out


@njit(inline="always")
def layer_state(seed, layer):
    return absorb(absorb(_G0, seed), np.uint64(layer))


@njit(inline="always")
def seed_at(key_state, tokens, t, H, pad, tm):
    h = key_state
    for j in range(H):
        pos = t - H + j
        if pos >= 0:
            h = mix64(h ^ tm[tokens[pos]])
        else:
            h = mix64(h ^ tm[pad])
    return h


@njit(cache=True)
def hash_many(a, b):
    out = np.empty(a.shape[0], np.uint64)
    for i in range(a.shape[0]):
        out[i] = absorb(a[i], b[i])
    return out


@njit(cache=True)
def g_values_at(seed, layer, tokens, tm, family, gp):
    st = layer_state(seed, layer)
    out = np.empty(tokens.shape[0], np.float64)
    for i in range(tokens.shape[0]):
        u = unit(mix64(st ^ tm[tokens[i]]))
        if family == 0:
            out[i] = 1.0 if u < gp else 0.0
        else:
            out[i] = u
    return out


@njit(inline="always")
def bernoulli_threshold(gp):
    # u < gp  <=>  (h >> 11) < ceil(gp * 2**53)
    return np.uint64(np.ceil(gp * 9007199254740992.0))


@njit(cache=True)
def _uniform_layer(w, act, n, st, tm, inv, keys, fac, order, bucket, count):
    # bucket sort the keys (uniform on [0, 1)), then fix buckets by insertion
    c = 0.0
    for b in range(n + 1):
        count[b] = 0
    for i in range(n):
        wi = w[i]
        c += wi * wi
        u = unit(mix64(st ^ tm[act[i]]))
        keys[i] = u
        b = min(int(u * n), n - 1)
        bucket[i] = b
        count[b + 1] += 1
    for b in range(1, n + 1):
        count[b] += count[b - 1]
    for i in range(n):
        b = bucket[i]
        order[count[b]] = i
        count[b] += 1
    for j in range(1, n):
        cur = order[j]
        key = keys[cur]
        h = j - 1
        while h >= 0 and keys[order[h]] > key:
            order[h + 1] = order[h]
            h -= 1
        order[h + 1] = cur
    less = 0.0
    inv2 = inv * inv
    for j in range(n):
        i = order[j]
        wi = w[i]
        fac[i] = (2.0 * less + wi) * inv2
        less += wi
    k = 0
    tot = 0.0
    for i in range(n):
        v = w[i] * fac[i]
        if v > TINY:
            act[k] = act[i]
            w[k] = v
            tot += v
            k += 1
    return c, k, tot


@njit(cache=True)
def winner_dist(p, seed, m, family, gp, tm, act, w, scratch, fac, order, bucket, count, coll):
    """Distribution of the m-layer tournament winner given the seed.

    On return ``act[:n]`` holds the surviving token ids in increasing order
    and ``w[:n]`` their probabilities; ``n`` is returned. ``coll[l]``
    receives the collision probability of the layer ``l + 1`` entrants.
    The weights are renormalized lazily: each layer update preserves total
    mass exactly in real arithmetic, so only rounding drift is removed.
    """
    n = 0
    tot = 0.0
    for x in range(p.shape[0]):
        if p[x] > 0.0:
            act[n] = x
            w[n] = p[x]
            tot += p[x]
            n += 1
    thr = bernoulli_threshold(gp)
    for layer in range(1, m + 1):
        st = layer_state(seed, layer)
        inv = 1.0 / tot
        c = 0.0
        if family == 0:
            s1 = 0.0
            for i in range(n):
                wi = w[i]
                c += wi * wi
                if (mix64(st ^ tm[act[i]]) >> _S11) < thr:
                    scratch[i] = 1.0
                    s1 += wi
                else:
                    scratch[i] = 0.0
            s1 *= inv
            f1 = (2.0 - s1) * inv
            f0 = (1.0 - s1) * inv
            k = 0
            tot = 0.0
            for i in range(n):
                v = w[i] * (f1 if scratch[i] > 0.5 else f0)
                if v > TINY:
                    act[k] = act[i]
                    w[k] = v
                    tot += v
                    k += 1
        else:
            c, k, tot = _uniform_layer(w, act, n, st, tm, inv, scratch, fac, order, bucket, count)
        coll[layer - 1] = c * inv * inv
        n = k
    inv = 1.0 / tot
    for i in range(n):
        w[i] *= inv
    return n


@njit(inline="always")
def pick(act, w, n, u):
    tot = 0.0
    for i in range(n):
        tot += w[i]
    target = u * tot
    acc = 0.0
    for i in range(n):
        acc += w[i]
        if acc > target:
            return act[i]
    return act[n - 1]


@njit(inline="always")
def _row(kind, tokens, t, init_row):
    if kind == 0:
        return 0
    if t == 0:
        return init_row
    return tokens[t - 1]


@njit(nogil=True, cache=True)
def generate_block(rows, kind, init_row, n0, n1, P, T, m, H, pad, key_states,
                   family, gp, tm, states, tokens, seeds, coll_sum,
                   coll_pos, record_pos):
    """Texts ``n0..n1``: ``P`` plain prompt tokens, then ``T`` watermarked ones."""
    N = rows.shape[1]
    act = np.empty(N, np.int64)
    w = np.empty(N, np.float64)
    scratch = np.empty(N, np.float64)
    fac = np.empty(N, np.float64)
    order = np.empty(N, np.int64)
    bucket = np.empty(N, np.int64)
    count = np.empty(N + 1, np.int64)
    coll = np.empty(max(m, 1), np.float64)
    for i in range(n0, n1):
        ts = states[i]
        key_state = key_states[i]
        row_tokens = tokens[i]
        for t in range(P + T):
            seed = seed_at(key_state, row_tokens, t, H, pad, tm)
            seeds[i, t] = seed
            p = rows[_row(kind, row_tokens, t, init_row)]
            layers = m if t >= P else 0
            n = winner_dist(p, seed, layers, family, gp, tm, act, w, scratch,
                            fac, order, bucket, count, coll)
            u = unit(draw(child(ts, t), 0))
            row_tokens[t] = pick(act, w, n, u)
            for layer in range(layers):
                coll_sum[i, layer] += coll[layer]
                if record_pos:
                    coll_pos[i, t - P, layer] = coll[layer]


@njit(nogil=True, cache=True)
def score_block(tokens, n0, n1, P, m, H, pad, key_state, family, gp, tm,
                llr_one, llr_zero, chat, g_floor, want_llr, gsum, llr,
                gmat, want_gmat):
    """Per-layer sums of g-values and log-likelihood ratios over positions ``P..``."""
    T = tokens.shape[1]
    thr = bernoulli_threshold(gp)
    for i in range(n0, n1):
        row_tokens = tokens[i]
        for t in range(P, T):
            seed = seed_at(key_state, row_tokens, t, H, pad, tm)
            tok = row_tokens[t]
            for layer in range(1, m + 1):
                h = mix64(layer_state(seed, layer) ^ tm[tok])
                if family == 0:
                    g = 1.0 if (h >> _S11) < thr else 0.0
                    if want_llr:
                        llr[i, layer - 1] += llr_one[layer - 1] if g > 0.5 else llr_zero[layer - 1]
                else:
                    g = unit(h)
                    if want_llr:
                        c = chat[layer - 1]
                        llr[i, layer - 1] += np.log(c + 2.0 * (1.0 - c) * max(g, g_floor))
                gsum[i, layer - 1] += g
                if want_gmat:
                    gmat[i, t - P, layer - 1] = g


@njit(nogil=True, cache=True)
def attack_block(rows, kind, init_row, n0, n1, P, T, m, H, pad, key_state,
                 family, gp, tm, bb_states, atk_states, n_attack, recount,
                 tokens):
    """Layer-inflation attack on texts ``n0..n1``.

    Text ``i`` position ``t`` queries the black box ``2**n_attack`` times;
    call ``c`` samples with ``draw(child(child(bb_states[i], t), c), 0)``.
    Prompt positions are a single plain draw from the black-box stream.
    """
    N = rows.shape[1]
    act = np.empty(N, np.int64)
    w = np.empty(N, np.float64)
    scratch = np.empty(N, np.float64)
    fac = np.empty(N, np.float64)
    order = np.empty(N, np.int64)
    bucket = np.empty(N, np.int64)
    count = np.empty(N + 1, np.int64)
    coll = np.empty(max(m, 1), np.float64)
    cum = np.empty(N, np.float64)
    n_calls = 1 << n_attack
    ent = np.empty(n_calls, np.int64)
    nxt = np.empty(n_calls, np.int64)
    pool = np.empty(n_calls, np.int64)
    counts = np.zeros(N, np.int64)
    for i in range(n0, n1):
        bb_text = bb_states[i]
        atk_text = atk_states[i]
        row_tokens = tokens[i]
        for t in range(P + T):
            seed = seed_at(key_state, row_tokens, t, H, pad, tm)
            p = rows[_row(kind, row_tokens, t, init_row)]
            bb_pos = child(bb_text, t)
            if t < P:
                n = winner_dist(p, seed, 0, family, gp, tm, act, w, scratch,
                                fac, order, bucket, count, coll)
                row_tokens[t] = pick(act, w, n, unit(draw(bb_pos, 0)))
                continue
            n = winner_dist(p, seed, m, family, gp, tm, act, w, scratch,
                            fac, order, bucket, count, coll)
            acc = 0.0
            for k in range(n):
                acc += w[k]
                cum[k] = acc
            for c in range(n_calls):
                u = unit(draw(child(bb_pos, c), 0))
                k = np.searchsorted(cum[:n], u * acc, side="right")
                if k >= n:
                    k = n - 1
                ent[c] = act[k]
            private = child(atk_text, t)
            for c in range(n_calls):
                pool[c] = ent[c]
                if not recount:
                    counts[ent[c]] += 1
            size = n_calls
            for layer in range(1, n_attack + 1):
                if recount:
                    for c in range(size):
                        counts[ent[c]] += 1
                half = size // 2
                for j in range(half):
                    a = ent[2 * j]
                    b = ent[2 * j + 1]
                    if counts[a] < counts[b]:
                        nxt[j] = a
                    elif counts[b] < counts[a]:
                        nxt[j] = b
                    elif tie_bit(private, layer, j) == 0:
                        nxt[j] = a
                    else:
                        nxt[j] = b
                if recount:
                    for c in range(size):
                        counts[ent[c]] = 0
                for j in range(half):
                    ent[j] = nxt[j]
                size = half
            if not recount:
                for c in range(n_calls):
                    counts[pool[c]] = 0
            row_tokens[t] = ent[0]
