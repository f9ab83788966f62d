"""Closed-form detection theory.

Moments of the mean and Bayesian scores given collision profiles, the
resulting TPR at a fixed FPR, the piecewise mean-score curve over the
number of layers, the optimal Bernoulli parameter scan, and the numeric
primitives these rely on.
"""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np

from .collision import ChatEstimate, CollisionProfile, detect_M
from .gsource import GSpec

# Wichura (1988), algorithm AS 241 (PPND16): relative error about 1e-16.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
      1.42151175831644588870e-7, 2.04426310338993978564e-15)


def _poly(coef, x):
    acc = 0.0
    for c in reversed(coef):
        acc = acc * x + c
    return acc


def _icdf_scalar(q):
    if not 0.0 < q < 1.0:
        raise ValueError("q: normal_icdf needs 0 < q < 1")
    d = q - 0.5
    if abs(d) <= 0.425:
        r = 0.180625 - d * d
        return d * _poly(_A, r) / _poly(_B, r)
    r = q if d < 0 else 1.0 - q
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if d < 0 else x


def normal_icdf(q):
    """Standard normal quantile function."""
    if np.ndim(q) == 0:
        return _icdf_scalar(float(q))
    return np.vectorize(_icdf_scalar, otypes=[float])(q)


def normal_cdf(x):
    """Standard normal CDF, ``erfc(-x / sqrt 2) / 2``."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    return np.vectorize(lambda v: 0.5 * math.erfc(-v / math.sqrt(2.0)), otypes=[float])(x)


@dataclass(frozen=True)
class ScoreMoments:
    mean: float
    variance: float
    condition: str
    score_kind: str


def _check_condition(condition):
    if condition not in ("w", "not_w"):
        raise ValueError("condition: expected 'w' or 'not_w'")


def _grid(C, m=None, T=None):
    """Broadcast a collision profile to a ``(T, m)`` matrix."""
    if isinstance(C, CollisionProfile):
        C = C.C
    C = np.asarray(C, dtype=float)
    if C.ndim == 0:
        if m is None or T is None:
            raise ValueError("m, T: needed for a scalar collision value")
        return np.full((T, m), float(C))
    if C.ndim == 1:
        m = C.size if m is None else m
        if m > C.size:
            raise ValueError(f"m: profile has only {C.size} layers")
        if T is None:
            raise ValueError("T: needed for a per-layer profile")
        return np.broadcast_to(C[:m], (T, m))
    m = C.shape[1] if m is None else m
    if T is not None and T != C.shape[0]:
        raise ValueError("T: does not match the per-position profile")
    return C[:, :m]


def _chat_vector(chat, m):
    c = chat.chat if isinstance(chat, ChatEstimate) else np.atleast_1d(np.asarray(chat, float))
    if c.size < m:
        raise ValueError(f"chat: need {m} layers, got {c.size}")
    return c[:m]


def _p1(gspec, C):
    p = gspec.p
    return p + p * (1.0 - p) * (1.0 - C)


def ms_moments(C, gspec, condition, m=None, T=None):
    """Mean and variance of the mean score.

    Parameters
    ----------
    C : CollisionProfile, array of shape (L,) or (T, L), or scalar
        Collision probabilities of the watermarked data.
    gspec : GSpec
    condition : {"w", "not_w"}
    m, T : int, optional
        Layers and positions; taken from ``C`` when it carries them.
    """
    _check_condition(condition)
    grid = _grid(C, m, T)
    n = grid.size
    if condition == "not_w":
        return ScoreMoments(gspec.mean, gspec.var / n, condition, "mean")
    if gspec.is_bernoulli:
        pi = _p1(gspec, grid)
        mean, ent_var = pi.mean(), pi * (1.0 - pi)
    else:
        mu = (4.0 - grid) / 6.0
        mean, ent_var = mu.mean(), (3.0 - grid) / 6.0 - mu ** 2
    return ScoreMoments(float(mean), float(ent_var.sum() / n ** 2), condition, "mean")


def ms_threshold(eps, m, T, gspec):
    """Mean-score threshold with false positive rate ``eps`` under the CLT."""
    if not 0.0 < eps <= 0.5:
        raise ValueError("epsilon: must lie in (0, 0.5]")
    if m * T < 30:
        raise ValueError("m*T: the normal approximation needs m*T >= 30")
    return gspec.mean + normal_icdf(1.0 - eps) * math.sqrt(gspec.var / (m * T))


def ms_tpr(eps, C, gspec, m=None, T=None):
    """Predicted mean-score TPR at FPR ``eps``."""
    grid = _grid(C, m, T)
    m, T = grid.shape[1], grid.shape[0]
    tau = ms_threshold(eps, m, T, gspec)
    if np.all(grid == 1.0):
        # both hypotheses give the same score law
        return float(eps)
    mo = ms_moments(grid, gspec, "w")
    if mo.variance <= 0:
        return 1.0 if mo.mean > tau else 0.0
    return 1.0 - normal_cdf((tau - mo.mean) / math.sqrt(mo.variance))


@dataclass(frozen=True)
class TheoryCurveConstants:
    A_hat: float
    A: float
    B: float
    B_hat: float
    C_big: float
    D_hat: float
    M: int = None


@dataclass(eq=False)
class TheoryCurve:
    m: np.ndarray
    tpr: np.ndarray
    epsilon: float
    gspec: GSpec
    score_kind: str = "mean"

    def to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "tpr_theory", "score_kind", "gspec", "epsilon"])
        for m, v in zip(self.m, self.tpr):
            w.writerow([int(m), repr(float(v)), self.score_kind, str(self.gspec),
                        repr(float(self.epsilon))])
        return buf.getvalue() if fh is None else None


def _layer_sequence(C):
    if isinstance(C, CollisionProfile):
        C = C.per_layer().C
    C = np.asarray(C, dtype=float)
    if C.ndim != 1:
        raise ValueError("C: expected a per-layer sequence")
    return C


def ms_tpr_curve(eps, C, T, m_max, gspec=None, M=None, delta=1e-6):
    """Piecewise closed-form mean-score TPR for ``m = 1..m_max``.

    Before saturation the per-layer signal ``a = 1 - C`` is summarized by
    its first two moments over layers ``1..M`` (over ``1..m_max`` when the
    profile never saturates) and

        TPR(m) = 1 - Phi((A_hat - A sqrt(m)) / B).

    From the saturation layer ``M`` on, extra layers carry no signal and

        TPR(m) = 1 - Phi((A_hat sqrt(m) - B_hat) / sqrt(C_big m - D_hat)),

    which tends to ``eps``. The two pieces agree at ``m = M``.

    Parameters
    ----------
    eps : float
    C : array of shape (L,) or CollisionProfile
        Non-decreasing per-layer collision probabilities.
    T : int
    m_max : int
    gspec : GSpec, default Bernoulli(0.5)
        Bernoulli(0.5) or uniform.
    M : int, optional
        Saturation layer; detected with tolerance ``delta`` when omitted.

    Returns
    -------
    TheoryCurve, TheoryCurveConstants
    """
    gspec = GSpec() if gspec is None else gspec
    if gspec == GSpec.bernoulli(0.5):
        k, base = 2.0, 4.0
    elif not gspec.is_bernoulli:
        k, base = math.sqrt(3.0), 3.0
    else:
        raise ValueError("gspec: the piecewise curve covers bernoulli(0.5) and uniform")
    C = _layer_sequence(C)
    if np.any(np.diff(C) < -1e-12):
        raise ValueError("C: per-layer collisions must be non-decreasing")
    if M is None:
        M = detect_M(C, delta)
    if M is None and m_max > C.size:
        raise ValueError("m_max: profile is shorter than m_max and never saturates")
    a = 1.0 - C
    L = M if M is not None else m_max
    ea, ea2 = a[:L].mean(), (a[:L] ** 2).mean()
    z = normal_icdf(1.0 - eps)
    A_hat = k * z * math.sqrt(T)
    A = T * ea
    B = math.sqrt(T * (base - ea2))
    B_hat = T * a[:L].sum()
    C_big = base * T
    D_hat = T * (a[:L] ** 2).sum()
    ms = np.arange(1, m_max + 1)
    out = np.empty(m_max)
    for i, m in enumerate(ms):
        if M is None or m < M:
            arg = (A_hat - A * math.sqrt(m)) / B
        else:
            arg = (A_hat * math.sqrt(m) - B_hat) / math.sqrt(C_big * m - D_hat)
        out[i] = 1.0 - normal_cdf(arg)
    consts = TheoryCurveConstants(A_hat, A, B, B_hat, C_big, D_hat, M)
    return TheoryCurve(ms, out, eps, gspec, "mean"), consts


def ms_tpr_curve_value(eps, consts, m):
    """Evaluate the curve at a single (possibly huge) ``m``."""
    if consts.M is None or m < consts.M:
        arg = (consts.A_hat - consts.A * math.sqrt(m)) / consts.B
    else:
        arg = (consts.A_hat * math.sqrt(m) - consts.B_hat) / math.sqrt(
            consts.C_big * m - consts.D_hat)
    return 1.0 - normal_cdf(arg)


@dataclass(frozen=True)
class IIntegrals:
    I1: float
    I2: float
    I3: float
    I4: float


_SERIES_K = 0.1
_SERIES_TERMS = 40


def _moment(j):
    # integral of t**j over [-1/2, 1/2]
    return 0.0 if j % 2 else 2.0 * 0.5 ** (j + 1) / (j + 1)


def _i_series(k):
    # ln(1 + k t) and ln^2(1 + k t) expanded in t = x - 1/2, where
    # chat + 2 (1 - chat) x = 1 + k t with k = 2 (1 - chat)
    I1 = I2 = I3 = I4 = 0.0
    harmonic = 0.0
    for n in range(1, _SERIES_TERMS + 1):
        c1 = (-1) ** (n + 1) / n * k ** n
        I1 += c1 * _moment(n)
        I2 += c1 * (_moment(n + 1) + 0.5 * _moment(n))
        if n >= 2:
            c2 = (-1) ** n * 2.0 * harmonic / n * k ** n
            I3 += c2 * _moment(n)
            I4 += c2 * (_moment(n + 1) + 0.5 * _moment(n))
        harmonic += 1.0 / n
    return IIntegrals(I1, I2, I3, I4)


def _xlogx(y, power=1):
    return 0.0 if y == 0 else y * math.log(y) ** power


def i_integrals(chat):
    """The four log moments of the uniform watermarked likelihood ratio.

    With ``y(x) = chat + 2 (1 - chat) x``::

        I1 = int_0^1 ln y dx        I2 = int_0^1 x ln y dx
        I3 = int_0^1 ln(y)^2 dx     I4 = int_0^1 x ln(y)^2 dx

    Closed-form antiderivatives are used, switching to a power series in
    ``1 - chat`` near ``chat = 1`` where they cancel catastrophically.
    """
    chat = float(chat)
    if not 0.0 <= chat <= 1.0:
        raise ValueError("chat: must lie in [0, 1]")
    k = 2.0 * (1.0 - chat)
    if k < _SERIES_K:
        return _i_series(k)
    lo, hi = chat, 2.0 - chat

    def F1(y):  # int ln y
        return _xlogx(y) - y

    def F2(y):  # int y ln y
        return 0.0 if y == 0 else y * y / 2 * math.log(y) - y * y / 4

    def F3(y):  # int ln^2 y
        return _xlogx(y, 2) - 2 * _xlogx(y) + 2 * y

    def F4(y):  # int y ln^2 y
        if y == 0:
            return 0.0
        lg = math.log(y)
        return y * y / 2 * lg * lg - y * y / 2 * lg + y * y / 4

    I1 = (F1(hi) - F1(lo)) / k
    I3 = (F3(hi) - F3(lo)) / k
    # x = (y - chat) / k
    I2 = ((F2(hi) - F2(lo)) - chat * (F1(hi) - F1(lo))) / k ** 2
    I4 = ((F4(hi) - F4(lo)) - chat * (F3(hi) - F3(lo))) / k ** 2
    return IIntegrals(I1, I2, I3, I4)


def i_integrals_quad(chat):
    """Same integrals by adaptive quadrature, for cross-checking."""
    from scipy.integrate import quad

    def y(x):
        return chat + 2.0 * (1.0 - chat) * x

    def lg(x):
        v = y(x)
        return math.log(v) if v > 0 else 0.0

    # the log is steep next to x = 0 when chat is small
    opts = dict(epsabs=1e-13, epsrel=1e-13, limit=200, points=(1e-9, 1e-6, 1e-3))
    return IIntegrals(quad(lambda x: lg(x), 0, 1, **opts)[0],
                      quad(lambda x: x * lg(x), 0, 1, **opts)[0],
                      quad(lambda x: lg(x) ** 2, 0, 1, **opts)[0],
                      quad(lambda x: x * lg(x) ** 2, 0, 1, **opts)[0])


def bernoulli_llr(gspec, chat):
    """Per-layer log-likelihood ratios ``(g = 1, g = 0)``."""
    chat = np.asarray(chat, dtype=float)
    p = gspec.p
    return np.log1p((1.0 - p) * (1.0 - chat)), np.log1p(-p * (1.0 - chat))


def _entry_moments(grid, chat, gspec, condition):
    # per-entry mean and variance of the log-likelihood ratio
    if gspec.is_bernoulli:
        l1, l0 = bernoulli_llr(gspec, chat)
        pi = np.full_like(grid, gspec.p) if condition == "not_w" else _p1(gspec, grid)
        mean = pi * l1 + (1 - pi) * l0
        var = pi * (1 - pi) * (l1 - l0) ** 2
        return mean, var
    ints = [i_integrals(c) for c in chat]
    I1 = np.array([i.I1 for i in ints])
    I2 = np.array([i.I2 for i in ints])
    I3 = np.array([i.I3 for i in ints])
    I4 = np.array([i.I4 for i in ints])
    if condition == "not_w":
        mean = np.broadcast_to(I1, grid.shape)
        second = np.broadcast_to(I3, grid.shape)
    else:
        mean = grid * I1 + 2 * (1 - grid) * I2
        second = grid * I3 + 2 * (1 - grid) * I4
    return mean, np.maximum(second - mean ** 2, 0.0)


def bs_moments(C, chat, gspec, condition, m=None, T=None):
    """Mean and variance of the summed log-likelihood ratio.

    This is the log-odds of the Bayesian score without the prior term.
    ``C`` describes the data and ``chat`` the detector; they may differ.
    """
    _check_condition(condition)
    grid = _grid(C, m, T)
    c = _chat_vector(chat, grid.shape[1])
    # layers with chat = 1 add exact zeros; dropping them keeps the sums
    # bit-identical once the detector saturates
    live = c < 1.0
    mean, var = _entry_moments(grid[:, live], c[live], gspec, condition)
    return ScoreMoments(float(mean.sum()), float(var.sum()), condition, "bayesian")


def bs_threshold_logodds(eps, chat, alpha, gspec, m, T):
    """Log-odds form of the closed-form Bayesian threshold."""
    if not 0.0 < eps <= 0.5:
        raise ValueError("epsilon: must lie in (0, 0.5]")
    mo = bs_moments(np.ones(m), chat, gspec, "not_w", m, T)
    return math.log(alpha) + mo.mean + normal_icdf(1.0 - eps) * math.sqrt(mo.variance)


def bs_tpr(eps, C, chat, alpha, gspec, m=None, T=None):
    """Predicted Bayesian-score TPR at FPR ``eps``; ``alpha`` cancels."""
    if not 0.0 < eps <= 0.5:
        raise ValueError("epsilon: must lie in (0, 0.5]")
    if not alpha > 0:
        raise ValueError("alpha: must be positive")
    grid = _grid(C, m, T)
    m, T = grid.shape[1], grid.shape[0]
    nw = bs_moments(grid, chat, gspec, "not_w")
    w = bs_moments(grid, chat, gspec, "w")
    cut = nw.mean + normal_icdf(1.0 - eps) * math.sqrt(nw.variance)
    if w.variance <= 0.0:
        if w.mean == nw.mean and nw.variance == 0.0:
            return eps
        return 1.0 if w.mean > cut else 0.0
    return 1.0 - normal_cdf((cut - w.mean) / math.sqrt(w.variance))


@dataclass(frozen=True)
class OptimalPResult:
    p_star: float
    grid: np.ndarray = field(repr=False)
    z_exact: np.ndarray = field(repr=False)
    z_asymptotic: np.ndarray = field(repr=False)
    p_star_asymptotic: float = 0.5


def z_exact(p, eps, m, T, ea, ea2):
    """Standardized threshold distance for Bernoulli(p) g-values.

    The TPR is ``1 - Phi(Z)``. With ``u = p (1 - p)``::

        Z = (z - E[a] sqrt(m T u)) / sqrt(1 + (1 - 2p) E[a] - u E[a^2])
    """
    p = np.asarray(p, dtype=float)
    u = p * (1 - p)
    z = normal_icdf(1.0 - eps)
    return (z - ea * np.sqrt(m * T * u)) / np.sqrt(1.0 + (1 - 2 * p) * ea - u * ea2)


def z_asymptotic(p, eps, m, T, ea):
    p = np.asarray(p, dtype=float)
    return normal_icdf(1.0 - eps) - ea * np.sqrt(m * T * p * (1 - p))


def _argmin_toward_half(grid, values, tol=1e-12):
    best = values.min()
    near = np.flatnonzero(values <= best + tol * max(1.0, abs(best)))
    return float(grid[near[np.argmin(np.abs(grid[near] - 0.5))]])


def optimal_p_scan(eps, m, T, a_stats, grid):
    """Scan Bernoulli parameters for the smallest ``Z(p)`` (largest TPR).

    Parameters
    ----------
    eps : float
    m, T : int
    a_stats : (float, float)
        ``E[a]`` and ``E[a^2]`` of the per-entry signal ``a = 1 - C``.
    grid : sequence of float in (0, 1)

    Returns
    -------
    OptimalPResult
        ``p_star`` minimizes the exact ``Z``; ``p_star_asymptotic`` the
        large-``mT`` approximation. Ties go to the value nearest 0.5.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid: need at least one p value")
    if np.any(grid <= 0) or np.any(grid >= 1):
        raise ValueError("grid: values must lie in (0, 1)")
    ea, ea2 = a_stats
    ze = z_exact(grid, eps, m, T, ea, ea2)
    za = z_asymptotic(grid, eps, m, T, ea)
    return OptimalPResult(_argmin_toward_half(grid, ze), grid, ze, za,
                          _argmin_toward_half(grid, za))


AD_CRITICAL = {0.15: 0.576, 0.10: 0.656, 0.05: 0.752, 0.025: 0.873, 0.01: 1.035}


@dataclass(frozen=True)
class ADResult:
    statistic: float
    adjusted: float
    critical: float
    alpha: float
    passed: bool


def anderson_darling(samples, alpha=0.05):
    """Anderson-Darling normality test with estimated mean and variance.

    The statistic is scaled by ``1 + 0.75/n + 2.25/n**2`` and compared with
    the tabulated critical value for ``alpha``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 20:
        raise ValueError("samples: need at least 20 values")
    if alpha not in AD_CRITICAL:
        raise ValueError(f"alpha: choose one of {sorted(AD_CRITICAL)}")
    s = x.std(ddof=1)
    if not s > 0:
        raise ValueError("samples: constant sample, the test is degenerate")
    w = (x - x.mean()) / s
    lo = np.log(normal_cdf(w))
    hi = np.log(normal_cdf(-w))[::-1]
    i = np.arange(1, n + 1)
    a2 = -n - np.sum((2 * i - 1) * (lo + hi)) / n
    adj = a2 * (1 + 0.75 / n + 2.25 / n ** 2)
    crit = AD_CRITICAL[alpha]
    return ADResult(float(a2), float(adj), crit, alpha, bool(adj < crit))
