"""Convergence diagnostics, posterior summaries and LPML model scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .areal_data import incidence_rate
from .model import CLUSTERING, Model
from .sampler import PosteriorDraws


@dataclass
class SummaryRow:
    param: str
    mean: float
    sd: float
    hpd_lo: float
    hpd_hi: float
    psrf: float


@dataclass
class ModelScore:
    lpml: float
    log_cpo: np.ndarray

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.log_cpo)


def psrf(chains) -> float:
    """Potential scale reduction factor of equal-length scalar chains.

    ``sqrt(((n - 1)/n W + B/n) / W)`` with ``W`` the mean within-chain
    variance and ``B/n`` the variance of the chain means.
    """
    c = np.asarray(chains, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("PSRF needs at least two chains")
    m, n = c.shape
    if n < 2:
        raise ValueError("PSRF needs chains of length >= 2")
    w = c.var(axis=1, ddof=1).mean()
    if not w > 0:
        raise ValueError("PSRF undefined: zero within-chain variance")
    b_over_n = c.mean(axis=1).var(ddof=1)
    return math.sqrt(((n - 1) / n * w + b_over_n) / w)


def hpd_interval(draws, level: float = 0.95) -> tuple[float, float]:
    """Shortest window of ``ceil(level * n)`` sorted draws (first one on ties)."""
    d = np.sort(np.asarray(draws, dtype=float).ravel())
    n = d.size
    if n < 20:
        raise ValueError("HPD interval needs at least 20 draws")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    m = int(math.ceil(level * n - 1e-9))
    widths = d[m - 1:] - d[: n - m + 1]
    i = int(np.argmin(widths))
    return float(d[i]), float(d[i + m - 1])


def lpml(loglik_draws) -> ModelScore:
    """LPML from an (M draws x A areas) matrix of log-likelihood terms.

    ``log CPO_i = log M - logsumexp_m(-loglik[m, i])``.
    """
    ll = np.asarray(loglik_draws, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise ValueError("loglik_draws must be a non-empty 2-d array")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood draws contain non-finite values")
    log_cpo = math.log(ll.shape[0]) - logsumexp(-ll, axis=0)
    return ModelScore(float(log_cpo.sum()), log_cpo)


def summary_params(model: Model) -> list[str]:
    names = ["beta0"] + [f"beta[{c}]" for c in model.data.covariate_names] + ["sigma2_u", "sigma2_s"]
    if model.mechanism == CLUSTERING:
        names += [f"gamma[{j + 1}]" for j in range(model.k)]
    else:
        names += ["alpha0"] + [f"alpha[{j + 1}]" for j in range(model.config.degree)] + ["sigma2_delta"]
    return names


def summarize_param(chains: np.ndarray, name: str, level: float = 0.95) -> SummaryRow:
    pooled = chains.ravel()
    if pooled.size == 0:
        raise ValueError("no draws to summarise")
    if np.ptp(pooled) == 0:
        lo, hi = hpd_interval(pooled, level)
        return SummaryRow(name, lo, 0.0, lo, hi, math.nan)
    try:
        r = psrf(chains)
    except ValueError:
        r = math.nan
    lo, hi = hpd_interval(pooled, level)
    sd = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
    return SummaryRow(name, float(pooled.mean()), sd, lo, hi, r)


def summarize(post: PosteriorDraws, model: Model, level: float = 0.95):
    """Parameter table plus per-area posterior means of theta, eps and
    the incidence rate per 100,000."""
    if post.n_chains == 0 or post.chains[0].draws.shape[0] == 0:
        raise ValueError("no draws to summarise")
    rows = [summarize_param(post.column(nm), nm, level) for nm in summary_params(model)]
    pooled = post.pooled()
    theta = np.empty((pooled.shape[0], model.data.n_areas))
    eps = np.empty_like(theta)
    for m, x in enumerate(pooled):
        theta[m] = model.theta(x)
        eps[m] = model.eps(x)
    rate = incidence_rate(theta, np.broadcast_to(model.e, theta.shape),
                          np.broadcast_to(model.data.n_pop, theta.shape))
    areas = dict(area_id=list(model.data.area_ids), theta_mean=theta.mean(axis=0),
                 eps_mean=eps.mean(axis=0), rate_per_100k=rate.mean(axis=0),
                 cluster_label=model.labels if model.labels is not None else None)
    return rows, areas


def score(post: PosteriorDraws) -> ModelScore:
    return lpml(post.pooled_loglik())


def format_table(rows: list[SummaryRow], title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Parameter':<24}{'Mean':>10}{'St.Dev.':>10}  {'HPD_95%':<22}{'PSRF':>7}")
    for r in rows:
        hpd = f"({r.hpd_lo:.3f},{r.hpd_hi:.3f})"
        lines.append(f"{r.param:<24}{r.mean:>10.3f}{r.sd:>10.3f}  {hpd:<22}{r.psrf:>7.3f}")
    return "\n".join(lines)
