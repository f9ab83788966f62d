"""Experiment pipelines and their CSV/JSON outputs.

Every stochastic input is drawn from ``RngStream.from_seed(master_seed)``:
child 1 feeds watermarked texts, 2 plain texts, 3 training texts, 4 the
attack's black box and 5 the attacker. Text ``i`` of a batch uses child
``i`` of its stream, so results do not depend on threads or batch size.
"""

from dataclasses import asdict, dataclass, field, replace
import csv
import hashlib
import io
import json
import math
import time
from importlib import resources

import jsonschema
import numpy as np

from .collision import estimate_chat_from_sums, profile_from_batch
from .gsource import (DEFAULT_KEY, STREAM_ATTACK, STREAM_ATTACKER, STREAM_PLAIN,
                      STREAM_TRAIN, STREAM_WATERMARKED, GSpec, RngStream, key_from_config)
from .langmodel import SequenceModel, make_distribution
from .scoring import (calibrate_threshold_empirical, score_texts, threshold_bs_closed_logodds,
                      threshold_ms_closed)
from .theory import (anderson_darling, bs_moments, bs_tpr, ms_moments, ms_tpr, ms_tpr_curve,
                     optimal_p_scan)
from .tournament import AttackConfig, TournamentConfig, attack_texts, generate_texts

SWEEP_COLUMNS = ["m", "score_kind", "gspec", "epsilon", "tau", "tpr_emp", "tpr_theory",
                 "n_texts", "T", "seed"]
ATTACK_COLUMNS = ["phase", "n_attack_layers", "tpr", "mean_score_avg", "tau"]
VALIDATE_COLUMNS = ["assertion", "expected", "observed", "tolerance", "pass"]
CLT_COLUMNS = ["statistic", "adjusted", "critical", "alpha", "passed", "clt_floor_ok",
               "n_texts", "T", "m", "seed"]
OPTIMAL_P_COLUMNS = ["p", "tpr_emp", "tpr_theory", "tau", "z_exact", "z_asymptotic",
                     "n_texts", "T", "m", "seed"]


class ConfigError(ValueError):
    pass


def config_schema():
    return json.loads(resources.files("twlab").joinpath("data/config_schema.json").read_text())


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict = field(default_factory=lambda: {"kind": "iid", "dist": "zipf", "N": 1000,
                                                 "s": 1.1})
    gspec: str = "bernoulli(0.5)"
    m: int = 30
    m_values: tuple = None
    T: int = 100
    n_texts: int = 1000
    n_unwatermarked: int = 10000
    n_train: int = 1000
    epsilon: float = 0.01
    H: int = 4
    prompt_len: int = None
    master_seed: int = 0
    key: str = DEFAULT_KEY.hex
    prior_w: float = 0.5
    n_attack_layers: int = 10
    attack_recount: bool = True
    ad_alpha: float = 0.05
    p_values: tuple = (0.3, 0.5, 0.7)
    hist_bins: int = 20
    output: str = None

    @classmethod
    def from_dict(cls, data):
        """Validate ``data`` against the schema and fill in defaults."""
        try:
            jsonschema.validate(data, config_schema())
        except jsonschema.ValidationError as err:
            path = "/".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(f"{path}: {err.message}") from None
        d = dict(data)
        if "m_values" in d:
            d["m_values"] = tuple(d["m_values"])
        if "p_values" in d:
            d["p_values"] = tuple(d["p_values"])
        if "model" in d:
            d["model"] = {"kind": "iid", **d["model"]}
        cfg = cls(**d)
        cfg._check()
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"<root>: invalid JSON ({err})") from None
        return cls.from_dict(data)

    def _check(self):
        if self.n_unwatermarked * self.epsilon < 1 - 1e-9:
            raise ConfigError("n_unwatermarked: must be at least 1/epsilon")
        try:
            self.build_model()
            GSpec.parse(self.gspec)
            key_from_config(self.key)
        except ValueError as err:
            raise ConfigError(f"model: {err}") from None
        if self.experiment == "clt" and self.n_texts < 200:
            raise ConfigError("n_texts: the normality check needs at least 200 texts")

    def with_seed(self, seed):
        return replace(self, master_seed=int(seed))

    @property
    def P(self):
        return self.H if self.prompt_len is None else self.prompt_len

    @property
    def ms(self):
        return sorted(set(self.m_values)) if self.m_values else [self.m]

    def build_model(self):
        spec = self.model
        kind = spec.get("kind", "iid")
        temp = spec.get("temperature", 1.0)
        if kind == "markov":
            if "matrix" not in spec:
                raise ValueError("matrix: markov model needs a transition matrix")
            return SequenceModel("markov", np.array(spec["matrix"], float), temp)
        params = {k: spec[k] for k in ("s", "q", "probs") if k in spec}
        dist = make_distribution(spec.get("dist", "zipf"), spec.get("N", 1000), **params)
        return SequenceModel("iid", dist, temp)

    def tournament(self, m=None, gspec=None):
        g = GSpec.parse(self.gspec) if gspec is None else gspec
        return TournamentConfig(self.m if m is None else m, g, self.H, key_from_config(self.key))

    def to_dict(self):
        d = asdict(self)
        d["m_values"] = list(self.ms)
        d["p_values"] = list(self.p_values)
        d["prompt_len"] = self.P
        d.pop("output")
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(eq=False)
class RunResult:
    """Rows of one run plus run-level extras; ``wall_time`` is never serialized."""

    kind: str
    config: ExperimentConfig
    columns: list
    rows: list
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def passed(self):
        if self.kind == "validate":
            return all(r["pass"] for r in self.rows)
        return True

    def to_json(self):
        doc = {"experiment": self.kind, "config_hash": self.config.hash(),
               "config": self.config.to_dict(), "columns": self.columns,
               "rows": self.rows, **self.extra}
        return json.dumps(doc, indent=2, sort_keys=False, default=_json_default) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_csv_cell(r[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, path, fmt="csv"):
        text = self.to_json() if fmt == "json" else self.to_csv()
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return v


def _f(x):
    return None if x is None else float(x)


class _Run:
    """Shared plumbing: model, streams and scoring for one config."""

    def __init__(self, cfg, threads):
        self.cfg = cfg
        self.threads = threads
        self.model = cfg.build_model()
        self.root = RngStream.from_seed(cfg.master_seed)
        self.gspec = GSpec.parse(cfg.gspec)

    def generate(self, m, stream, n, gspec=None, sub=None):
        rng = self.root.child(stream)
        if sub is not None:
            rng = rng.child(sub)
        tc = self.cfg.tournament(m, gspec)
        return generate_texts(self.model, tc, self.cfg.T, n, rng, self.threads,
                              prompt_len=self.cfg.P)

    def score(self, tokens, m, gspec=None, chat=None):
        g = self.gspec if gspec is None else gspec
        return score_texts(tokens, key_from_config(self.cfg.key), m, self.cfg.H, g,
                           self.model.N, self.cfg.P, chat, threads=self.threads)

    def plain_tokens(self):
        return self.generate(0, STREAM_PLAIN, self.cfg.n_unwatermarked).tokens

    def train(self, m, gspec=None):
        """Training batch at depth ``m``: measured collisions and fitted chat."""
        g = self.gspec if gspec is None else gspec
        batch = self.generate(m, STREAM_TRAIN, self.cfg.n_train, g)
        sums = self.score(batch.tokens, m, g)
        chat = estimate_chat_from_sums(sums.gsum, self.cfg.T, g)
        return profile_from_batch(batch), chat


def _timed(fn):
    def wrapper(cfg, threads=None):
        t0 = time.perf_counter()
        res = fn(cfg, threads)
        res.wall_time = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def run_sweep(cfg, threads=None):
    """Empirical and predicted TPR for each ``m`` in ``cfg.m_values``.

    Collisions and chat come from one training batch at the largest ``m``.
    Plain texts are scored once at that depth and truncated per ``m``. The
    mean-score prediction is the exact normal approximation for the
    measured profile (empty below the ``m T >= 30`` floor); the piecewise
    curve over ``1..max m`` is attached as ``ms_curve``.
    """
    run = _Run(cfg, threads)
    ms = cfg.ms
    m_max = ms[-1]
    eps, T = cfg.epsilon, cfg.T
    alpha = cfg.prior_w / (1 - cfg.prior_w)
    profile, chat = run.train(m_max)
    C = profile.C
    plain = run.score(run.plain_tokens(), m_max, chat=chat)
    curve = None
    if run.gspec == GSpec.bernoulli(0.5) or not run.gspec.is_bernoulli:
        curve, consts = ms_tpr_curve(eps, profile.monotone().C, T, m_max, run.gspec)
    rows = []
    for m in ms:
        batch = run.generate(m, STREAM_WATERMARKED, cfg.n_texts, sub=m)
        sc = run.score(batch.tokens, m, chat=chat.chat[:m])
        tau_ms = calibrate_threshold_empirical(plain.mean_scores(m), eps)
        tau_bs = calibrate_threshold_empirical(plain.bayesian_logodds(m, alpha), eps)
        if m * T >= 30:
            th_ms = ms_tpr(eps, C[:m], run.gspec, m, T)
        else:
            th_ms = None
        th_bs = bs_tpr(eps, C[:m], chat.chat[:m], alpha, run.gspec, m, T)
        for kind, scores, tau, th in (("mean", sc.mean_scores(m), tau_ms, th_ms),
                                      ("bayesian", sc.bayesian_logodds(m, alpha), tau_bs, th_bs)):
            rows.append({"m": m, "score_kind": kind, "gspec": str(run.gspec), "epsilon": eps,
                         "tau": _f(tau), "tpr_emp": _f(np.mean(scores > tau)),
                         "tpr_theory": _f(th), "n_texts": cfg.n_texts, "T": T,
                         "seed": cfg.master_seed})
    extra = {"collision_profile": C.tolist(), "chat": chat.chat.tolist(),
             "saturation_layer": None if curve is None else consts.M,
             "ms_curve": None if curve is None else curve.tpr.tolist()}
    return RunResult("sweep", cfg, SWEEP_COLUMNS, rows, extra)


@_timed
def run_clt_check(cfg, threads=None):
    """Anderson-Darling normality check of watermarked mean scores."""
    if cfg.n_texts < 200:
        raise ConfigError("n_texts: the normality check needs at least 200 texts")
    run = _Run(cfg, threads)
    batch = run.generate(cfg.m, STREAM_WATERMARKED, cfg.n_texts)
    ms = run.score(batch.tokens, cfg.m).mean_scores()
    ad = anderson_darling(ms, cfg.ad_alpha)
    counts, edges = np.histogram(ms, bins=cfg.hist_bins)
    row = {"statistic": ad.statistic, "adjusted": ad.adjusted, "critical": ad.critical,
           "alpha": ad.alpha, "passed": ad.passed, "clt_floor_ok": cfg.m * cfg.T >= 30,
           "n_texts": cfg.n_texts, "T": cfg.T, "m": cfg.m, "seed": cfg.master_seed}
    extra = {"histogram": {"edges": edges.tolist(), "counts": counts.tolist()}}
    return RunResult("clt", cfg, CLT_COLUMNS, [row], extra)


@_timed
def run_attack_eval(cfg, threads=None):
    """Mean-score detection before and after the layer-inflation attack."""
    run = _Run(cfg, threads)
    m, T = cfg.m, cfg.T
    tau = calibrate_threshold_empirical(run.score(run.plain_tokens(), m).mean_scores(),
                                        cfg.epsilon)
    base = run.score(run.generate(m, STREAM_WATERMARKED, cfg.n_texts).tokens, m).mean_scores()
    attack = AttackConfig(cfg.n_attack_layers, cfg.tournament(m), cfg.attack_recount)
    tokens = attack_texts(run.model, attack, T, cfg.n_texts, run.root.child(STREAM_ATTACK),
                          run.root.child(STREAM_ATTACKER), threads, cfg.P)
    hit = run.score(tokens, m).mean_scores()
    rows = [{"phase": "baseline", "n_attack_layers": 0, "tpr": _f(np.mean(base > tau)),
             "mean_score_avg": _f(base.mean()), "tau": tau},
            {"phase": "attacked", "n_attack_layers": cfg.n_attack_layers,
             "tpr": _f(np.mean(hit > tau)), "mean_score_avg": _f(hit.mean()), "tau": tau}]
    extra = {"fraction_below_tau": {"baseline": _f(np.mean(base <= tau)),
                                    "attacked": _f(np.mean(hit <= tau))}}
    return RunResult("attack", cfg, ATTACK_COLUMNS, rows, extra)


def _check(rows, name, expected, observed, tol):
    ok = bool(abs(observed - expected) <= tol)
    rows.append({"assertion": name, "expected": _f(expected), "observed": _f(observed),
                 "tolerance": _f(tol), "pass": ok})


def _var_se(var, n):
    return var * math.sqrt(2.0 / (n - 1))


@_timed
def run_validate(cfg, threads=None):
    """Compare empirical moments, FPRs and TPRs with their closed forms.

    Theory uses the collision profile measured on the very texts it is
    compared with and chat from a separate training batch. Tolerances are
    three standard errors, binomial bands for rates, and 0.05 for TPRs.
    """
    run = _Run(cfg, threads)
    m, T, eps, g = cfg.m, cfg.T, cfg.epsilon, run.gspec
    alpha = cfg.prior_w / (1 - cfg.prior_w)
    _, chat = run.train(m)
    batch = run.generate(m, STREAM_WATERMARKED, cfg.n_texts)
    C = profile_from_batch(batch).C
    wm = run.score(batch.tokens, m, chat=chat)
    nw = run.score(run.plain_tokens(), m, chat=chat)
    n, n0 = cfg.n_texts, cfg.n_unwatermarked
    rows = []
    if g.is_bernoulli:
        freq = wm.gsum[:, 0].sum() / (n * T)
        p1 = g.p + g.p * (1 - g.p) * (1 - C[0])
        _check(rows, "g_freq_layer1_w", p1, freq, 3 * math.sqrt(p1 * (1 - p1) / (n * T)))
    for cond, scores, k in (("w", wm.mean_scores(), n), ("not_w", nw.mean_scores(), n0)):
        mo = ms_moments(C, g, cond, m, T)
        v = scores.var(ddof=1)
        _check(rows, f"ms_mean_{cond}", mo.mean, scores.mean(), 3 * math.sqrt(v / k))
        _check(rows, f"ms_var_{cond}", mo.variance, v, 3 * _var_se(v, k))
    for cond, scores, k in (("w", wm.bayesian_logodds(), n), ("not_w", nw.bayesian_logodds(), n0)):
        mo = bs_moments(C, chat, g, cond, m, T)
        v = scores.var(ddof=1)
        _check(rows, f"bs_llr_mean_{cond}", mo.mean, scores.mean(), 3 * math.sqrt(v / k))
        _check(rows, f"bs_llr_var_{cond}", mo.variance, v, 3 * _var_se(v, k))
    band = 3 * math.sqrt(eps * (1 - eps) / n0)
    tau_ms = threshold_ms_closed(eps, m, T, g)
    tau_bs = threshold_bs_closed_logodds(eps, chat, 1.0, g, m, T)
    _check(rows, "fpr_ms_closed", eps, np.mean(nw.mean_scores() > tau_ms), band)
    _check(rows, "fpr_bs_closed", eps, np.mean(nw.bayesian_logodds() > tau_bs), band)
    _check(rows, "tpr_ms_closed", ms_tpr(eps, C, g, m, T), np.mean(wm.mean_scores() > tau_ms),
           0.05)
    _check(rows, "tpr_bs_closed", bs_tpr(eps, C, chat, alpha, g, m, T),
           np.mean(wm.bayesian_logodds() > tau_bs), 0.05)
    extra = {"collision_profile": C.tolist(), "chat": chat.chat.tolist()}
    return RunResult("validate", cfg, VALIDATE_COLUMNS, rows, extra)


@_timed
def run_optimal_p(cfg, threads=None):
    """Empirical and predicted mean-score TPR across Bernoulli parameters.

    The ``Z(p)`` scan uses the per-entry signal measured at p = 0.5 (or the
    first listed p when 0.5 is absent).
    """
    run = _Run(cfg, threads)
    m, T, eps = cfg.m, cfg.T, cfg.epsilon
    plain = run.plain_tokens()
    ps = list(cfg.p_values)
    ref = ps.index(0.5) if 0.5 in ps else 0
    results = []
    for i, p in enumerate(ps):
        g = GSpec.bernoulli(p)
        batch = run.generate(m, STREAM_WATERMARKED, cfg.n_texts, g, sub=i)
        C = profile_from_batch(batch).C
        wm = run.score(batch.tokens, m, g).mean_scores()
        tau = calibrate_threshold_empirical(run.score(plain, m, g).mean_scores(), eps)
        th = ms_tpr(eps, C, g, m, T) if m * T >= 30 else None
        results.append((p, C, _f(np.mean(wm > tau)), th, tau))
    a = 1.0 - results[ref][1]
    a_stats = (_f(a.mean()), _f((a ** 2).mean()))
    scan = optimal_p_scan(eps, m, T, a_stats, np.array(ps))
    rows = [{"p": p, "tpr_emp": te, "tpr_theory": _f(th), "tau": tau,
             "z_exact": _f(ze), "z_asymptotic": _f(za), "n_texts": cfg.n_texts, "T": T,
             "m": m, "seed": cfg.master_seed}
            for (p, _, te, th, tau), ze, za in zip(results, scan.z_exact, scan.z_asymptotic)]
    grid = np.round(np.arange(1, 10) / 10, 10)
    full = optimal_p_scan(eps, m, T, a_stats, grid)
    extra = {"a_stats": list(a_stats), "p_star": full.p_star,
             "p_star_asymptotic": full.p_star_asymptotic, "scan_grid": grid.tolist(),
             "scan_z_exact": full.z_exact.tolist()}
    return RunResult("optimal_p", cfg, OPTIMAL_P_COLUMNS, rows, extra)


RUNNERS = {"sweep": run_sweep, "clt": run_clt_check, "attack": run_attack_eval,
           "validate": run_validate, "optimal_p": run_optimal_p}


def run_experiment(cfg, threads=None):
    return RUNNERS[cfg.experiment](cfg, threads)
