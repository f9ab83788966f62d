import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from twlab.collision import collision_probability
from twlab.gsource import (GSpec, RngStream, SecretKey, context_window, derive_seed,
                           g_value)
from twlab.langmodel import (SequenceModel, TokenDistribution, iid_model, make_distribution,
                             sample_index)
from twlab.tournament import (AttackConfig, TournamentConfig, attack_g, attack_texts,
                              generate_text, generate_texts, inflate_attack_sample, knockout,
                              make_blackbox, tournament_sample, winner_distribution,
                              winner_distribution_seeded)

from conftest import binom_sigma


def _play(entrants, g, ties):
    """Reference knockout: g[l][x] scores, ties[l][j] in {0, 1}."""
    cur = list(entrants)
    for layer in range(len(g)):
        nxt = []
        for j in range(0, len(cur), 2):
            a, b = cur[j], cur[j + 1]
            if g[layer][a] != g[layer][b]:
                nxt.append(a if g[layer][a] > g[layer][b] else b)
            else:
                nxt.append(b if ties[layer][j // 2] else a)
        cur = nxt
    return cur[0]


def _brute_winner(p, g, ties):
    """Winner law by enumerating every entrant tuple."""
    N, m = len(p), len(g)
    out = np.zeros(N)
    for tup in itertools.product(range(N), repeat=1 << m):
        out[_play(tup, g, ties)] += math.prod(p[x] for x in tup)
    return out


def _tie_patterns(m):
    shapes = [1 << (m - l) for l in range(1, m + 1)]
    for flat in itertools.product((0, 1), repeat=sum(shapes)):
        it = iter(flat)
        yield [[next(it) for _ in range(s)] for s in shapes]


# knockout mechanics

def test_knockout_examples():
    score = lambda layer, x: {3: 0.1, 5: 0.9, 7: 0.5, 2: 0.4}[x]
    assert knockout([3, 5, 7, 2], score, lambda l, j: 0) == 5
    assert knockout([7], score, lambda l, j: 0) == 7
    flat = lambda layer, x: 0
    assert knockout([1, 2], flat, lambda l, j: 0) == 1
    assert knockout([1, 2], flat, lambda l, j: 1) == 2
    with pytest.raises(ValueError):
        knockout([1, 2, 3], flat, lambda l, j: 0)


def test_knockout_uses_layer_scores():
    # token 1 wins layer 1, loses the final on layer-2 scores
    g = {1: {0: 0, 1: 1, 2: 0, 3: 0}, 2: {1: 0, 2: 1}}
    assert knockout([0, 1, 2, 3], lambda l, x: g[l].get(x, 0), lambda l, j: 0) == 2


@given(st.lists(st.integers(0, 5), min_size=8, max_size=8),
       st.lists(st.lists(st.integers(0, 1), min_size=6, max_size=6), min_size=3, max_size=3),
       st.lists(st.integers(0, 1), min_size=7, max_size=7))
def test_knockout_matches_reference(entrants, g, tiebits):
    ties = [tiebits[:4], tiebits[4:6], tiebits[6:]]
    got = knockout(entrants, lambda l, x: g[l - 1][x], lambda l, j: ties[l - 1][j])
    assert got == _play(entrants, g, ties)


# exact winner law

def test_two_token_example_marginal():
    # p = (0.7, 0.3), m = 1: average over the 4 g-assignments and both tie coins
    p = [0.7, 0.3]
    tot = 0.0
    for g in itertools.product((0, 1), repeat=2):
        for tie in (0, 1):
            tot += _brute_winner(p, [list(g)], [[tie]])[0] / 8
    assert abs(tot - 0.7) <= 1e-15


@pytest.mark.parametrize("N,m", [(2, 1), (3, 1), (4, 1), (2, 2), (3, 2), (4, 2)])
def test_exact_non_distortion_bernoulli(N, m):
    p = np.random.default_rng(N * 10 + m).dirichlet(np.ones(N))
    avg = np.zeros(N)
    tables = list(itertools.product((0, 1), repeat=N * m))
    ties = list(_tie_patterns(m))
    for flat in tables:
        g = np.array(flat).reshape(m, N)
        q, _ = winner_distribution(p, g)
        for tp in ties:
            w = _brute_winner(p, g.tolist(), tp)
            # the tie bits never change the law
            assert np.max(np.abs(w - q)) <= 1e-12
        avg += q / len(tables)
    assert np.max(np.abs(avg - p)) <= 1e-12


@pytest.mark.parametrize("pg", [0.3, 0.8])
def test_exact_non_distortion_biased_bernoulli(pg):
    N, m = 3, 2
    p = np.array([0.5, 0.3, 0.2])
    avg = np.zeros(N)
    for flat in itertools.product((0, 1), repeat=N * m):
        weight = math.prod(pg if b else 1 - pg for b in flat)
        avg += weight * winner_distribution(p, np.array(flat).reshape(m, N))[0]
    assert np.max(np.abs(avg - p)) <= 1e-12


@pytest.mark.parametrize("N,m", [(2, 2), (3, 2), (4, 1), (4, 2)])
def test_exact_non_distortion_uniform(N, m):
    # continuous g-values only matter through their ranks
    p = np.random.default_rng(N + m).dirichlet(np.ones(N))
    perms = list(itertools.permutations(range(N)))
    avg = np.zeros(N)
    n = 0
    for ranks in itertools.product(perms, repeat=m):
        g = np.array(ranks, dtype=float)
        q, _ = winner_distribution(p, g)
        if N <= 3:
            assert np.allclose(_brute_winner(p, g.tolist(), [[0] * 4, [0] * 2]), q,
                               atol=1e-12)
        avg += q
        n += 1
    assert np.max(np.abs(avg / n - p)) <= 1e-12


def test_winner_collisions_are_entrant_collisions():
    p = np.array([0.6, 0.3, 0.1])
    g = np.array([[1, 0, 0], [0, 1, 1]])
    q, coll = winner_distribution(p, g)
    assert coll[0] == pytest.approx(collision_probability(p))
    q1, _ = winner_distribution(p, g[:1])
    assert coll[1] == pytest.approx(q1 @ q1)


@settings(max_examples=30)
@given(st.integers(2, 40), st.integers(1, 12), st.integers(0, 2**64 - 1),
       st.sampled_from(["bernoulli(0.5)", "bernoulli(0.2)", "uniform"]))
def test_kernel_winner_law_matches_python(N, m, seed, spec):
    gspec = GSpec.parse(spec)
    p = np.random.default_rng(N * m).dirichlet(np.ones(N))
    cfg = TournamentConfig(m=m, gspec=gspec)
    table = np.array([[g_value(seed, l, x, gspec) for x in range(N)]
                      for l in range(1, m + 1)])
    q_ref, c_ref = winner_distribution(p, table)
    q, c = winner_distribution_seeded(p, seed, cfg)
    assert np.max(np.abs(q - q_ref)) <= 1e-12
    assert np.max(np.abs(c - c_ref)) <= 1e-12


# samplers

def test_point_mass_always_wins():
    d = TokenDistribution(np.eye(10)[7])
    for m in (0, 1, 5, 30):
        cfg = TournamentConfig(m=m)
        for i in range(5):
            assert tournament_sample(d, 123 + i, cfg, RngStream(i)) == 7
    model = iid_model(d)
    text = generate_text(model, TournamentConfig(m=30), 1, RngStream(3))
    assert text.tokens.tolist() == [7]


def test_explicit_and_distribution_samplers_agree():
    p = make_distribution("zipf", 8, s=1.0)
    cfg = TournamentConfig(m=3)
    seed = 0xABCDEF
    q, _ = winner_distribution_seeded(p, seed, cfg)
    root = RngStream(99)
    n = 20000
    counts = np.bincount([tournament_sample(p, seed, cfg, root.child(i), "explicit")
                          for i in range(n)], minlength=8)
    keep = q * n >= 5
    assert stats.chisquare(counts[keep], q[keep] * n * counts[keep].sum() / (q[keep] * n).sum()
                           ).pvalue > 1e-3
    with pytest.raises(ValueError):
        tournament_sample(p, seed, TournamentConfig(m=31), root, "explicit")
    with pytest.raises(ValueError):
        tournament_sample(p, seed, cfg, root, "magic")


def test_generate_text_matches_python_reference(small_model):
    cfg = TournamentConfig(m=6, gspec=GSpec.parse("uniform"), H=3)
    rng = RngStream(17)
    batch = generate_texts(small_model, cfg, 25, 4, rng, prompt_len=2)
    pad = small_model.N
    p = small_model.rows[0]
    for i in range(4):
        s = rng.child(i)
        toks = []
        for t in range(27):
            seed = derive_seed(context_window(toks, t, cfg.H, pad), cfg.key)
            assert batch.seeds[i, t] == seed
            if t < 2:
                q = p
            else:
                table = [[g_value(seed, l, x, cfg.gspec) for x in range(pad)]
                         for l in range(1, cfg.m + 1)]
                q = winner_distribution(p, np.array(table))[0]
            toks.append(sample_index(q, s.child(t).uniform(0)))
        assert batch.tokens[i].tolist() == toks
        assert generate_text(small_model, cfg, 25, s, prompt_len=2).tokens.tolist() == toks


def test_markov_model_generation(np_rng):
    mat = np_rng.dirichlet(np.ones(6), size=6)
    model = SequenceModel("markov", mat)
    cfg = TournamentConfig(m=4)
    a = generate_texts(model, cfg, 30, 3, RngStream(5))
    b = generate_texts(model, cfg, 30, 3, RngStream(5))
    assert np.array_equal(a.tokens, b.tokens)
    # a zero transition is never taken
    mat2 = mat.copy()
    mat2[:, 0] = 0
    mat2 /= mat2.sum(1, keepdims=True)
    c = generate_texts(SequenceModel("markov", mat2), cfg, 30, 20, RngStream(6))
    assert not np.any(c.tokens[:, 1:] == 0)


def test_m_zero_is_plain_sampling(zipf_model):
    rng = RngStream(8)
    batch = generate_texts(zipf_model, TournamentConfig(m=0), 10, 6, rng)
    p = zipf_model.rows[0]
    for i in range(6):
        ref = [sample_index(p, rng.child(i).child(t).uniform(0)) for t in range(10)]
        assert batch.tokens[i].tolist() == ref


def test_determinism_prefix_and_threads(zipf_model):
    cfg = TournamentConfig(m=20)
    rng = RngStream.from_seed(4)
    a = generate_texts(zipf_model, cfg, 40, 64, rng, threads=1)
    b = generate_texts(zipf_model, cfg, 40, 64, rng, threads=4)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.coll_sum, b.coll_sum)
    c = generate_texts(zipf_model, cfg, 40, 16, rng)
    assert np.array_equal(a.tokens[:16], c.tokens)
    d = generate_texts(zipf_model, cfg, 40, 16, rng, offset=16)
    assert np.array_equal(a.tokens[16:32], d.tokens)
    other = generate_texts(zipf_model, cfg, 40, 16, RngStream.from_seed(5))
    assert not np.array_equal(a.tokens[:16], other.tokens)


def test_seeds_follow_the_window(zipf_model):
    cfg = TournamentConfig(m=5, H=2, key=SecretKey(0x1234))
    text = generate_text(zipf_model, cfg, 12, RngStream(1))
    toks = text.tokens.tolist()
    for t in range(12):
        assert text.seeds[t] == derive_seed(context_window(toks, t, 2, 1000), cfg.key)


def test_config_validation():
    for bad in (dict(m=-1), dict(m=1.5), dict(H=0)):
        with pytest.raises(ValueError):
            TournamentConfig(**bad)
    with pytest.raises(TypeError):
        TournamentConfig(gspec="uniform")
    with pytest.raises(TypeError):
        TournamentConfig(key=5)
    for n in (0, 21, 2.5):
        with pytest.raises(ValueError):
            AttackConfig(n)
    with pytest.raises(ValueError):
        generate_texts(iid_model(make_distribution("uniform", 4)), TournamentConfig(), 0, 1,
                       RngStream(0))


def test_mc_non_distortion(zipf_model):
    n = 100_000
    batch = generate_texts(zipf_model, TournamentConfig(m=30), 1, n, RngStream.from_seed(11),
                           rekey=True)
    freq = np.bincount(batch.tokens[:, 0], minlength=1000) / n
    p = zipf_model.rows[0]
    for x in np.argsort(p)[::-1][:20]:
        assert abs(freq[x] - p[x]) <= 4 * binom_sigma(p[x], n)


def test_watermark_signal(gspec):
    model = iid_model(make_distribution("uniform", 1000))
    cfg = TournamentConfig(m=30, gspec=gspec)
    batch = generate_texts(model, cfg, 100, 40, RngStream(2))
    g = np.array([[g_value(int(s), l, int(x), gspec) for l in range(1, 31)]
                  for s, x in zip(batch.seeds.ravel(), batch.tokens.ravel())])
    per_text = g.reshape(40, -1).mean(1)
    se = per_text.std(ddof=1) / math.sqrt(40)
    assert per_text.mean() - gspec.mean > 5 * se


# attack

def test_attack_g_examples():
    assert attack_g([5, 5, 9, 9], 5) == -2
    assert attack_g([1, 1, 1, 1], 1) == -4
    obs = [3, 8, 1, 6]
    assert all(attack_g(obs, x) == -1 for x in obs)
    with pytest.raises(ValueError):
        attack_g([1, 2], 3)


def _scripted(outputs):
    it = iter(outputs)
    return lambda context: next(it)


@pytest.mark.parametrize("recount", [True, False])
def test_inflate_examples(recount):
    att = AttackConfig(2, recount=recount)
    assert inflate_attack_sample(_scripted([4, 4, 4, 9]), [], att, RngStream(1)) == 9
    if not recount:
        assert inflate_attack_sample(_scripted([9, 4, 4, 4]), [], att, RngStream(1)) == 9
    att3 = AttackConfig(3, recount=recount)
    assert inflate_attack_sample(_scripted([6] * 8), [], att3, RngStream(2)) == 6


def test_recount_final_is_a_coin_flip():
    # 9 and 4 each appear once among the final's entrants
    att = AttackConfig(2, recount=True)
    got = {inflate_attack_sample(_scripted([9, 4, 4, 4]), [], att, RngStream(s))
           for s in range(40)}
    assert got == {4, 9}


def test_inflate_picks_a_rarest_token():
    # a singleton beats every repeated token, whatever the pairing
    rng = np.random.default_rng(3)
    for trial in range(50):
        a, b = rng.integers(2, 12, size=2)
        if a + b > 13:
            a, b = 6, 5
        pool = [1] * int(a) + [2] * int(b) + [3] * int(15 - a - b) + [77]
        rng.shuffle(pool)
        got = inflate_attack_sample(_scripted(pool), [], AttackConfig(4, recount=False),
                                    RngStream(trial))
        assert got == 77


def test_blackbox_uses_fresh_streams(zipf_model):
    cfg = TournamentConfig(m=10)
    box = make_blackbox(zipf_model, cfg, RngStream(5))
    draws = [box([1, 2, 3]) for _ in range(200)]
    assert len(set(draws)) > 5
    box2 = make_blackbox(zipf_model, cfg, RngStream(5))
    assert [box2([1, 2, 3]) for _ in range(200)] == draws


@pytest.mark.parametrize("recount", [True, False])
def test_attack_kernel_matches_reference(recount):
    model = iid_model(make_distribution("zipf", 30, s=1.2))
    cfg = TournamentConfig(m=8, H=2)
    att = AttackConfig(3, cfg, recount=recount)
    bb_rng, ak_rng = RngStream(41), RngStream(42)
    P, T, n = 2, 6, 3
    got = attack_texts(model, att, T, n, bb_rng, ak_rng, prompt_len=P)
    p = model.rows[0]
    for i in range(n):
        out = []
        for t in range(P + T):
            if t < P:
                out.append(sample_index(p, bb_rng.child(i).child(t).uniform(0)))
            else:
                box = make_blackbox(model, cfg, bb_rng.child(i).child(t))
                out.append(inflate_attack_sample(box, out, att, ak_rng.child(i).child(t)))
        assert got[i].tolist() == out


def test_attack_monotone_in_layers():
    model = iid_model(make_distribution("uniform", 1000))
    cfg = TournamentConfig(m=30)
    n, T = 40, 20
    scores = {}
    for N in (1, 2, 4, 8, 10):
        toks = attack_texts(model, AttackConfig(N, cfg), T, n, RngStream(7), RngStream(8))
        g = np.empty((n, T))
        for i in range(n):
            row = toks[i].tolist()
            for t in range(T):
                seed = derive_seed(context_window(row, t, cfg.H, 1000), cfg.key)
                g[i, t] = np.mean([g_value(seed, l, row[t], cfg.gspec) for l in range(1, 31)])
        scores[N] = g.mean(1)
    Ns = sorted(scores)
    for a, b in zip(Ns, Ns[1:]):
        d = scores[b] - scores[a]
        assert d.mean() <= 2 * d.std(ddof=1) / math.sqrt(n)
    assert scores[10].mean() < scores[1].mean()
