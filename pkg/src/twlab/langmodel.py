"""Synthetic next-token distributions."""

from dataclasses import dataclass, field

import numpy as np

SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Probability vector over token ids ``0..N-1``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("probs: need a 1-d vector with at least 2 entries")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probs: entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probs: must sum to 1 (got {p.sum():.15g})")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def N(self):
        return self.probs.size

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, TokenDistribution) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


def _normalized(w):
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


def make_distribution(kind, N, **params):
    """Build a built-in distribution.

    Parameters
    ----------
    kind : {"uniform", "zipf", "two_point", "explicit"}
    N : int
        Vocabulary size.
    **params
        ``s`` for zipf (exponent), ``q`` for two_point (mass on token 0),
        ``probs`` for explicit.
    """
    if int(N) != N or N < 2:
        raise ValueError("N: vocabulary size must be an integer >= 2")
    N = int(N)
    if kind == "uniform":
        return TokenDistribution(np.full(N, 1.0 / N))
    if kind == "zipf":
        s = params.get("s", 1.0)
        if not s > 0:
            raise ValueError("s: zipf exponent must be positive")
        return TokenDistribution(_normalized(np.arange(1, N + 1, dtype=np.float64) ** -s))
    if kind == "two_point":
        q = params.get("q")
        if q is None or not 0.0 < q < 1.0:
            raise ValueError("q: two_point mass must lie in (0, 1)")
        p = np.full(N, (1.0 - q) / (N - 1))
        p[0] = q
        return TokenDistribution(_normalized(p))
    if kind == "explicit":
        probs = params.get("probs")
        if probs is None or len(probs) != N:
            raise ValueError("probs: explicit distribution needs N probabilities")
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0) or not p.sum() > 0:
            raise ValueError("probs: entries must be non-negative with positive sum")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probs: entries must sum to 1")
        return TokenDistribution(_normalized(p))
    raise ValueError(f"kind: unknown distribution kind {kind!r}")


def apply_temperature(probs, temperature):
    if not temperature > 0:
        raise ValueError("temperature: must be positive")
    p = np.asarray(probs, dtype=np.float64)
    if temperature == 1.0:
        return p / p.sum()
    out = np.zeros_like(p)
    pos = p > 0
    # work in log space so tiny probabilities survive large exponents
    lg = np.log(p[pos]) / temperature
    lg -= lg.max()
    out[pos] = np.exp(lg)
    return out / out.sum()


@dataclass(frozen=True, eq=False)
class SequenceModel:
    """An iid or first-order Markov token source.

    ``base`` is a :class:`TokenDistribution` for ``kind="iid"`` and an
    ``N x N`` row-stochastic matrix for ``kind="markov"``. Markov models draw
    their first token from ``initial`` (uniform when omitted).
    """

    kind: str
    base: object
    temperature: float = 1.0
    initial: object = None
    rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "iid":
            base = self.base
            if not isinstance(base, TokenDistribution):
                base = TokenDistribution(base)
            rows = apply_temperature(base.probs, self.temperature)[None, :]
        elif self.kind == "markov":
            mat = np.asarray(self.base, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 2:
                raise ValueError("base: markov model needs a square N x N matrix")
            if np.any(mat < 0) or np.any(np.abs(mat.sum(axis=1) - 1.0) > SUM_TOL):
                raise ValueError("base: transition rows must be probability vectors")
            N = mat.shape[0]
            init = self.initial
            if init is None:
                init = np.full(N, 1.0 / N)
            init = TokenDistribution(getattr(init, "probs", init))
            if init.N != N:
                raise ValueError("initial: size must match the transition matrix")
            rows = np.vstack([mat, init.probs[None, :]])
            rows = np.vstack([apply_temperature(r, self.temperature) for r in rows])
        else:
            raise ValueError(f"kind: unknown sequence model kind {self.kind!r}")
        for r in rows:
            TokenDistribution(r)
        rows = np.ascontiguousarray(rows)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def N(self):
        return self.rows.shape[1]

    @property
    def kind_code(self):
        return 0 if self.kind == "iid" else 1

    @property
    def init_row(self):
        return self.N if self.kind == "markov" else 0


def iid_model(dist, temperature=1.0):
    return SequenceModel("iid", dist, temperature)


def next_distribution(model, context=None):
    """Next-token distribution; ``context`` is the previous token or ``None``."""
    if model.kind == "iid":
        return TokenDistribution(model.rows[0])
    if context is None:
        return TokenDistribution(model.rows[model.N])
    return TokenDistribution(model.rows[int(context)])


def sample_index(probs, u):
    """Inverse-CDF lookup: first index whose cumulative mass exceeds ``u``."""
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    if k >= len(cdf):
        k = int(np.flatnonzero(np.asarray(probs) > 0)[-1])
    return k


def sample_token(dist, rng):
    """Draw one token using the next uniform of ``rng`` (an ``RngStream``)."""
    return sample_index(dist.probs, rng.next_uniform())


def entropy(dist):
    """Shannon entropy in nats, with ``0 ln 0 = 0``."""
    p = dist.probs[dist.probs > 0]
    return float(-(p * np.log(p)).sum())
