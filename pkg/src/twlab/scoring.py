"""Detection scores, thresholds and verdicts.

Two scores are supported. The mean score averages all g-values of a text.
The Bayesian score is the posterior probability of the watermark under a
per-layer likelihood parameterized by the trained collisions ``chat``.
Bayesian scores saturate at 1.0 in double precision for long texts, so
everything that compares them (calibration, verdicts, the detectors) works
on log-odds, which is an increasing transform and leaves verdicts intact.
"""

from dataclasses import dataclass
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from ._parallel import run_chunks
from .collision import ChatEstimate, estimate_chat_from_sums
from .gsource import GSpec
from .theory import bernoulli_llr, bs_threshold_logodds, ms_threshold

G_FLOOR = 1e-9


@dataclass(frozen=True, eq=False)
class GMatrix:
    """g-values of one text, shape ``(T, m)``."""

    values: np.ndarray
    gspec: GSpec

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("values: expected a non-empty T x m matrix")
        if self.gspec.is_bernoulli:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("values: Bernoulli g-values must be 0 or 1")
        elif np.any(v < 0) or np.any(v > 1):
            raise ValueError("values: uniform g-values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class DetectorParams:
    chat: ChatEstimate
    prior_w: float = 0.5
    g_floor: float = G_FLOOR

    def __post_init__(self):
        if not 0.0 < self.prior_w < 1.0:
            raise ValueError("prior_w: must lie in (0, 1)")
        if not 0.0 < self.g_floor <= 1e-6:
            raise ValueError("g_floor: must lie in (0, 1e-6]")
        if not isinstance(self.chat, ChatEstimate):
            object.__setattr__(self, "chat", ChatEstimate(np.asarray(self.chat, float), 0))

    @classmethod
    def from_alpha(cls, chat, alpha, g_floor=G_FLOOR):
        if not alpha > 0:
            raise ValueError("alpha: must be positive")
        return cls(chat, alpha / (1.0 + alpha), g_floor)

    @property
    def alpha(self):
        return self.prior_w / (1.0 - self.prior_w)


@dataclass(frozen=True)
class ScoreReport:
    score: float
    kind: str
    threshold: float
    verdict: str

    def row(self, text_id):
        return [text_id, self.kind, repr(self.score), repr(self.threshold), self.verdict]


SCORE_CSV_HEADER = ["text_id", "score_kind", "score", "threshold", "verdict"]


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _token_mix(N):
    return K.token_mix(N + 1)


def recompute_g_matrix(tokens, key, m, H, gspec, vocab_size, prompt_len=0):
    """Re-derive the g-values of ``tokens`` from the key.

    ``vocab_size`` fixes the padding token used for the context window of
    the first positions; it must be the generator's vocabulary size. Only
    positions from ``prompt_len`` on are returned.
    """
    tokens = np.ascontiguousarray(np.asarray(tokens, dtype=np.int64))
    if tokens.ndim != 1 or tokens.size <= prompt_len:
        raise ValueError("tokens: need at least one position after the prompt")
    if m < 1:
        raise ValueError("m: need at least one layer")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError("tokens: ids must lie in 0..vocab_size-1")
    T = tokens.size - prompt_len
    gmat = np.zeros((1, T, m))
    gsum = np.zeros((1, m))
    dummy = np.zeros(m)
    K.score_block(tokens[None, :], 0, 1, prompt_len, m, H, vocab_size, np.uint64(key.state),
                  gspec.code, gspec.p, _token_mix(vocab_size), dummy, dummy, dummy,
                  G_FLOOR, False, gsum, np.zeros((1, m)), gmat, True)
    return GMatrix(gmat[0], gspec)


def mean_score(g):
    return float(np.mean(g.values))


def _llr_tables(params, gspec, m):
    chat = params.chat.chat
    if chat.size != m:
        raise ValueError(f"chat: has {chat.size} layers, g-matrix has {m}")
    return bernoulli_llr(gspec, chat)


def bayesian_logodds(g, params):
    """Log posterior odds ``ln alpha + sum of per-entry log-likelihood ratios``."""
    l1, l0 = _llr_tables(params, g.gspec, g.m)
    if g.gspec.is_bernoulli:
        llr = np.where(g.values > 0.5, l1, l0)
    else:
        c = params.chat.chat
        llr = np.log(c + 2.0 * (1.0 - c) * np.maximum(g.values, params.g_floor))
    return float(llr.sum() + math.log(params.alpha))


def bayesian_score(g, params):
    return sigmoid(bayesian_logodds(g, params))


def calibrate_threshold_empirical(scores, eps):
    """Conservative upper quantile: the ``ceil((1 - eps)(n + 1))``-th order statistic."""
    s = np.sort(np.asarray(scores, dtype=float))
    n = s.size
    if not 0.0 < eps < 1.0:
        raise ValueError("epsilon: must lie in (0, 1)")
    if n * eps < 1.0 - 1e-9:
        raise ValueError(f"scores: need at least 1/epsilon = {math.ceil(1 / eps - 1e-9)} values")
    k = min(math.ceil((1.0 - eps) * (n + 1) - 1e-9), n)
    return float(s[k - 1])


def threshold_ms_closed(eps, m, T, gspec):
    return ms_threshold(eps, m, T, gspec)


def threshold_bs_closed_logodds(eps, chat, alpha, gspec, m, T):
    return bs_threshold_logodds(eps, chat, alpha, gspec, m, T)


def threshold_bs_closed(eps, chat, alpha, gspec, m, T):
    return sigmoid(threshold_bs_closed_logodds(eps, chat, alpha, gspec, m, T))


def classify(score, tau):
    return "w" if score > tau else "not_w"


def tpr_at_fpr(watermarked, unwatermarked, eps):
    w = np.asarray(watermarked, dtype=float)
    if w.size == 0:
        raise ValueError("watermarked: need at least one score")
    tau = calibrate_threshold_empirical(unwatermarked, eps)
    return float(np.mean(w > tau)), tau


def report(g, kind, threshold, params=None):
    """Score one g-matrix and classify it."""
    if kind == "mean":
        s = mean_score(g)
        return ScoreReport(s, kind, threshold, classify(s, threshold))
    if kind == "bayesian":
        lo = bayesian_logodds(g, params)
        verdict = classify(lo, float(logit(threshold)) if 0 < threshold < 1 else threshold)
        return ScoreReport(sigmoid(lo), kind, threshold, verdict)
    raise ValueError(f"kind: unknown score kind {kind!r}")


@dataclass(eq=False)
class BatchScores:
    """Per-layer sums for a batch of texts.

    ``gsum[i, l]`` is the sum of layer-``l + 1`` g-values of text ``i`` and
    ``llr[i, l]`` the matching log-likelihood ratio sum. Both scores at any
    ``m`` up to the scored depth follow from prefix sums.
    """

    gsum: np.ndarray
    llr: np.ndarray
    T: int

    @property
    def m(self):
        return self.gsum.shape[1]

    def mean_scores(self, m=None):
        m = self.m if m is None else m
        return self.gsum[:, :m].sum(axis=1) / (m * self.T)

    def bayesian_logodds(self, m=None, alpha=1.0):
        if self.llr is None:
            raise ValueError("llr: batch was scored without chat")
        m = self.m if m is None else m
        return self.llr[:, :m].sum(axis=1) + math.log(alpha)


def score_texts(tokens, key, m, H, gspec, vocab_size, prompt_len=0, chat=None,
                g_floor=G_FLOOR, threads=None):
    """Score many texts at once; ``tokens`` has shape ``(n, prompt_len + T)``."""
    tokens = np.ascontiguousarray(np.asarray(tokens, dtype=np.int64))
    n, width = tokens.shape
    T = width - prompt_len
    if T < 1:
        raise ValueError("tokens: need at least one position after the prompt")
    want = chat is not None
    c = np.ones(m) if chat is None else np.asarray(getattr(chat, "chat", chat), float)
    if c.size < m:
        raise ValueError(f"chat: need {m} layers, got {c.size}")
    c = np.ascontiguousarray(c[:m])
    l1, l0 = bernoulli_llr(gspec, c)
    gsum = np.zeros((n, m))
    llr = np.zeros((n, m))
    tm = _token_mix(vocab_size)
    gm = np.zeros((1, 1, 1))
    ks = np.uint64(key.state)

    def work(lo, hi):
        K.score_block(tokens, lo, hi, prompt_len, m, H, vocab_size, ks, gspec.code, gspec.p,
                      tm, l1, l0, c, g_floor, want, gsum, llr, gm, False)

    run_chunks(work, n, threads)
    return BatchScores(gsum, llr if want else None, T)


def _as_array(X):
    if isinstance(X, np.ndarray):
        arr = X
    else:
        arr = np.stack([getattr(g, "values", g) for g in X])
    if arr.ndim != 3:
        raise ValueError("X: expected g-matrices of shape (n, T, m)")
    return np.asarray(arr, dtype=float)


class MeanScoreDetector(ClassifierMixin, BaseEstimator):
    """Mean-score detector on g-matrices ``X`` of shape ``(n, T, m)``.

    ``fit`` calibrates the threshold on the texts labelled 0, empirically,
    or uses the closed-form threshold when ``threshold="closed"``.
    """

    def __init__(self, epsilon=0.01, gspec=None, threshold="empirical"):
        self.epsilon = epsilon
        self.gspec = gspec
        self.threshold = threshold

    def _scores(self, X):
        return _as_array(X).mean(axis=(1, 2))

    def fit(self, X, y):
        arr = _as_array(X)
        y = np.asarray(y)
        self.classes_ = np.array([0, 1])
        if self.threshold == "closed":
            gspec = self.gspec or GSpec()
            self.tau_ = threshold_ms_closed(self.epsilon, arr.shape[2], arr.shape[1], gspec)
        elif self.threshold == "empirical":
            self.tau_ = calibrate_threshold_empirical(self._scores(arr[y == 0]), self.epsilon)
        else:
            raise ValueError("threshold: expected 'empirical' or 'closed'")
        return self

    def decision_function(self, X):
        check_is_fitted(self, "tau_")
        return self._scores(X) - self.tau_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


class BayesianDetector(ClassifierMixin, BaseEstimator):
    """Bayesian-score detector on g-matrices ``X`` of shape ``(n, T, m)``.

    ``fit`` estimates per-layer collisions from the texts labelled 1 and
    calibrates the log-odds threshold on those labelled 0. With
    ``prior_w=None`` the prior is the labelled watermark fraction.
    """

    def __init__(self, epsilon=0.01, gspec=None, prior_w=0.5, g_floor=G_FLOOR, min_train=100):
        self.epsilon = epsilon
        self.gspec = gspec
        self.prior_w = prior_w
        self.g_floor = g_floor
        self.min_train = min_train

    def _logodds(self, X):
        arr = _as_array(X)
        c = self.params_.chat.chat
        if arr.shape[2] != c.size:
            raise ValueError(f"X: expected {c.size} layers, got {arr.shape[2]}")
        gspec = self.gspec or GSpec()
        if gspec.is_bernoulli:
            l1, l0 = bernoulli_llr(gspec, c)
            llr = np.where(arr > 0.5, l1, l0)
        else:
            llr = np.log(c + 2.0 * (1.0 - c) * np.maximum(arr, self.g_floor))
        return llr.sum(axis=(1, 2)) + math.log(self.params_.alpha)

    def fit(self, X, y):
        arr = _as_array(X)
        y = np.asarray(y)
        gspec = self.gspec or GSpec()
        self.classes_ = np.array([0, 1])
        wm = arr[y == 1]
        chat = estimate_chat_from_sums(wm.sum(axis=1), arr.shape[1], gspec, self.min_train)
        prior = float(np.mean(y == 1)) if self.prior_w is None else self.prior_w
        self.params_ = DetectorParams(chat, prior, self.g_floor)
        self.tau_ = calibrate_threshold_empirical(self._logodds(arr[y == 0]), self.epsilon)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "tau_")
        return self._logodds(X) - self.tau_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def predict_proba(self, X):
        check_is_fitted(self, "tau_")
        p = sigmoid(self._logodds(X))
        return np.column_stack([1.0 - p, p])
