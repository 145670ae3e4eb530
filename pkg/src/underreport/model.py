"""Generative models: Poisson likelihood, log-linear relative risks, the
cluster and logistic reporting mechanisms and their priors.

All Gaussian constants are (mean, variance).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy.special import expit, gammaln

from .areal_data import ArealDataset, Graph, compute_expected_counts
from .errors import DataValidationError

CLUSTERING = "clustering"
POGIT = "pogit"
EPS_CAP = 1.0 - 1e-12
LOG_HALF_NORMAL_CONST = math.log(2.0) - 0.5 * math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    """Model choice and prior constants; defaults follow the TB analysis."""

    mechanism: str = CLUSTERING
    k: Optional[int] = None  # taken from the cluster labels when None
    degree: int = 3
    # "expected": naive E_i = N_i sum(Y)/sum(N); "population": E_i = N_i
    offset: str = "expected"
    beta0_mean: float = -8.0
    beta0_var: float = 1.0
    beta_var: float = 100.0
    alpha0_mean: float = 2.0
    alpha0_var: float = 0.36
    alpha_var: float = 100.0
    variance_prior_var: float = 1.0  # half-normal N(0, v) on (0, inf)
    gamma1_upper: float = 0.05
    gamma_upper: float = 1.0 - 1e-6
    clamp: float = 50.0
    use_likelihood: bool = True

    def validate(self) -> None:
        if self.mechanism not in (CLUSTERING, POGIT):
            raise DataValidationError(f"unknown mechanism {self.mechanism!r}")
        if self.offset not in ("expected", "population"):
            raise DataValidationError(f"unknown offset {self.offset!r}")
        for name in ("beta0_var", "beta_var", "alpha0_var", "alpha_var", "variance_prior_var", "clamp"):
            if not getattr(self, name) > 0:
                raise DataValidationError(f"{name} must be positive")
        if not 0 < self.gamma1_upper < 1:
            raise DataValidationError("gamma1_upper must lie in (0, 1)")
        if not self.gamma1_upper <= self.gamma_upper < 1:
            raise DataValidationError("gamma_upper must lie in [gamma1_upper, 1)")
        if self.degree < 1:
            raise DataValidationError("degree must be >= 1")
        if self.k is not None and self.k < 1:
            raise DataValidationError("k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataValidationError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        path = Path(path)
        if not path.is_file():
            raise DataValidationError(f"{path}: file not found")
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise DataValidationError(f"{path}: expected a key-value document")
        doc = doc.get("model", doc)
        return cls.from_dict(doc)

    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- densities

def log_likelihood(y, e, theta, eps) -> float:
    y, e, theta, eps = (np.asarray(v, dtype=float) for v in (y, e, theta, eps))
    if not (y.shape == e.shape == theta.shape == eps.shape):
        raise ValueError("y, e, theta and eps must have equal lengths")
    mu = e * theta * eps
    if np.any(~(mu > 0)):
        raise ValueError("Poisson means must be positive")
    return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))


def linear_predictor(beta0, beta, X, u, s, clamp: float = 50.0) -> np.ndarray:
    """``exp(beta0 + X beta + u + s)`` with the exponent clamped to +-clamp."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    u, s = np.asarray(u, dtype=float), np.asarray(s, dtype=float)
    if X.shape[1] != beta.shape[0] or u.shape != (X.shape[0],) or s.shape != u.shape:
        raise ValueError("shape mismatch in linear predictor")
    eta = beta0 + X @ beta + u + s
    n_clamped = int(np.sum(np.abs(eta) > clamp))
    if n_clamped:
        warnings.warn(f"log relative risk clamped at +-{clamp} for {n_clamped} area(s)",
                      RuntimeWarning, stacklevel=2)
    return np.exp(np.clip(eta, -clamp, clamp))


def eps_clustering(gamma, h) -> np.ndarray:
    """Reporting probabilities ``1 - gamma[label]`` from a one-hot H."""
    h = np.asarray(h)
    gamma = np.asarray(gamma, dtype=float)
    if h.ndim != 2 or h.shape[1] != gamma.shape[0]:
        raise ValueError("membership matrix does not match gamma")
    if not np.all((h == 0) | (h == 1)) or not np.all(h.sum(axis=1) == 1):
        raise ValueError("membership matrix rows must be one-hot")
    if np.any(np.diff(gamma) < 0) or gamma[0] < 0 or gamma[-1] >= 1:
        raise ValueError("gamma must be ordered within [0, 1)")
    return 1.0 - h @ gamma


class OrthogonalPolynomial:
    """Orthonormal cubic (by default) basis in ``w``, vanishing at ``mean(w)``.

    Columns are Gram-Schmidt orthonormalised powers of the centred proxy,
    ``(w - wbar)^1..^degree``. No constant term enters, so every basis
    function is zero at ``wbar`` and the reporting intercept keeps its
    meaning at the mean proxy. Only the first column is zero-mean in
    general; that is the price of vanishing at ``wbar``.
    """

    def __init__(self, w, degree: int = 3):
        w = np.asarray(w, dtype=float)
        if len(np.unique(w)) < degree + 1:
            raise ValueError(f"need at least {degree + 1} distinct proxy values")
        self.degree = degree
        self.center = float(w.mean())
        self.scale = float(np.abs(w - self.center).max())
        v = self._powers(w)
        # modified Gram-Schmidt, tracked as v @ coef
        coef = np.eye(degree)
        basis = v.copy()
        for j in range(degree):
            for i in range(j):
                r = basis[:, i] @ basis[:, j]
                basis[:, j] -= r * basis[:, i]
                coef[:, j] -= r * coef[:, i]
            nrm = np.linalg.norm(basis[:, j])
            if nrm <= 1e-12 * math.sqrt(len(w)):
                raise ValueError("proxy values too degenerate for the requested degree")
            basis[:, j] /= nrm
            coef[:, j] /= nrm
        self.coef = coef
        self.basis = basis

    def _powers(self, w) -> np.ndarray:
        c = (np.asarray(w, dtype=float) - self.center) / self.scale
        return np.stack([c ** (j + 1) for j in range(self.degree)], axis=1)

    def __call__(self, w) -> np.ndarray:
        return self._powers(np.atleast_1d(w)) @ self.coef


def orthogonal_poly(w, degree: int = 3) -> np.ndarray:
    return OrthogonalPolynomial(w, degree).basis


def eps_pogit(alpha0, alpha, g_basis, delta, clamp: float = 50.0) -> np.ndarray:
    g = np.atleast_2d(np.asarray(g_basis, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    delta = np.asarray(delta, dtype=float)
    if g.shape[1] != alpha.shape[0] or delta.shape != (g.shape[0],):
        raise ValueError("shape mismatch in reporting predictor")
    eta = np.clip(alpha0 + g @ alpha + delta, -clamp, clamp)
    return np.minimum(expit(eta), EPS_CAP)


def icar_logdensity(s, tau: float, graph: Graph, tol: float = 1e-9) -> float:
    """Intrinsic CAR log-density on the sum-to-zero subspace.

    ``(A - c)/2 log tau - tau/2 * sum over edges (s_i - s_j)^2`` with ``c``
    connected components; ``s`` must sum to zero within each component.
    """
    if not tau > 0:
        raise ValueError("ICAR precision must be positive")
    s = np.asarray(s, dtype=float)
    comp = graph.component_labels
    sums = np.bincount(comp, weights=s, minlength=graph.n_components)
    if np.any(np.abs(sums) > tol * max(1.0, np.abs(s).sum())):
        raise ValueError("spatial effects must sum to zero within each component")
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    q = float(np.sum((s[i] - s[j]) ** 2))
    return 0.5 * (graph.n - graph.n_components) * math.log(tau) - 0.5 * tau * q


def _norm_logpdf(x, mean, var) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)))


def _half_normal_logpdf(x, var) -> float:
    return LOG_HALF_NORMAL_CONST - 0.5 * math.log(var) - x * x / (2 * var)


def gamma_logprior(gamma, b1: float, bk: float) -> float:
    """Ordered conditional uniforms: gamma_1 ~ U(0, b1),
    gamma_j | gamma_{j-1} ~ U(gamma_{j-1}, bk)."""
    g = np.asarray(gamma, dtype=float)
    if g[0] < 0 or g[0] > b1 or np.any(np.diff(g) < 0) or g[-1] >= bk:
        return -math.inf
    return -math.log(b1) - float(np.sum(np.log(bk - g[:-1])))


# ---------------------------------------------------------------- parameters

@dataclass
class RiskParams:
    beta0: float
    beta: np.ndarray
    u: np.ndarray
    s: np.ndarray
    sigma2_u: float
    sigma2_s: float


@dataclass
class ClusterReportParams:
    gamma: np.ndarray


@dataclass
class PogitReportParams:
    alpha0: float
    alpha: np.ndarray
    delta: np.ndarray
    sigma2_delta: float


@dataclass
class Layout:
    """Positions of each parameter in the flat state vector.

    Order: beta0, beta, sigma2_u, sigma2_s, u, s, then either gamma or
    alpha0, alpha, sigma2_delta, delta.
    """

    n_areas: int
    p: int
    mechanism: str
    k: int = 0
    degree: int = 0
    offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = 0
        spec = [("beta0", 1), ("beta", self.p), ("sigma2_u", 1), ("sigma2_s", 1),
                ("u", self.n_areas), ("s", self.n_areas)]
        if self.mechanism == CLUSTERING:
            spec.append(("gamma", self.k))
        else:
            spec += [("alpha0", 1), ("alpha", self.degree), ("sigma2_delta", 1), ("delta", self.n_areas)]
        for name, size in spec:
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos

    def __getitem__(self, name) -> slice:
        a, b = self.offsets[name]
        return slice(a, b)

    def start(self, name) -> int:
        return self.offsets[name][0]

    def names(self, covariate_names, area_ids) -> list[str]:
        out = []
        for name, (a, b) in self.offsets.items():
            if name == "beta":
                out += [f"beta[{c}]" for c in covariate_names]
            elif name in ("u", "s", "delta"):
                out += [f"{name}[{a_id}]" for a_id in area_ids]
            elif b - a == 1:
                out.append(name)
            else:
                out += [f"{name}[{j + 1}]" for j in range(b - a)]
        return out


# ---------------------------------------------------------------- assembled model

class Model:
    """A dataset bound to a model configuration, ready for sampling."""

    def __init__(self, dataset: ArealDataset, config: ModelConfig, labels=None):
        config.validate()
        self.data = dataset
        self.config = config
        if config.offset == "population" or (not config.use_likelihood and dataset.y.sum() == 0):
            self.e = dataset.n_pop.astype(float)
        else:
            self.e = compute_expected_counts(dataset)
        self.X = dataset.covariates
        self.graph = dataset.graph
        self.labels = None
        self.poly = None
        if config.mechanism == CLUSTERING:
            if labels is None:
                raise DataValidationError("the clustering model needs cluster labels")
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (dataset.n_areas,):
                raise DataValidationError("cluster labels do not match the number of areas")
            k = config.k if config.k is not None else int(labels.max())
            counts = np.bincount(labels, minlength=k + 1)[1:]
            if labels.min() < 1 or labels.max() > k or np.any(counts == 0):
                empty = [j + 1 for j in range(k) if counts[j] == 0]
                raise DataValidationError(f"cluster labels must cover 1..{k}; empty groups: {empty}")
            self.labels = labels
            self.k = k
            self.layout = Layout(dataset.n_areas, self.X.shape[1], CLUSTERING, k=k)
        else:
            if dataset.proxy_w is None:
                raise DataValidationError("the pogit model needs the reporting proxy column 'w'")
            self.poly = OrthogonalPolynomial(dataset.proxy_w, config.degree)
            self.k = 0
            self.layout = Layout(dataset.n_areas, self.X.shape[1], POGIT, degree=config.degree)

    @property
    def mechanism(self) -> str:
        return self.config.mechanism

    @property
    def g_basis(self) -> np.ndarray:
        return self.poly.basis

    @property
    def h(self) -> np.ndarray:
        from .clustering import labels_to_membership
        return labels_to_membership(self.labels)

    def param_names(self) -> list[str]:
        return self.layout.names(self.data.covariate_names, self.data.area_ids)

    def digest(self) -> str:
        d = self.data
        parts = [self.config.digest(), d.y.tobytes(), d.n_pop.tobytes(), d.covariates_raw.tobytes(),
                 d.graph.edges.tobytes()]
        if self.labels is not None:
            parts.append(self.labels.tobytes())
        if d.proxy_w is not None:
            parts.append(d.proxy_w.tobytes())
        h = hashlib.sha256()
        for p in parts:
            h.update(p if isinstance(p, bytes) else p.encode())
        return h.hexdigest()[:16]

    def initial_state(self) -> np.ndarray:
        cfg, lay = self.config, self.layout
        x = np.zeros(lay.size)
        x[lay["beta0"]] = cfg.beta0_mean
        x[lay["sigma2_u"]] = 0.5
        x[lay["sigma2_s"]] = 0.5
        if self.mechanism == CLUSTERING:
            b1, bk = cfg.gamma1_upper, cfg.gamma_upper
            j = np.arange(self.k)
            x[lay["gamma"]] = 0.5 * (b1 + (bk - b1) * j / self.k)
        else:
            x[lay["sigma2_delta"]] = 0.5
        return x

    # -- unpacking

    def risk(self, x) -> RiskParams:
        lay = self.layout
        return RiskParams(float(x[lay.start("beta0")]), x[lay["beta"]], x[lay["u"]], x[lay["s"]],
                          float(x[lay.start("sigma2_u")]), float(x[lay.start("sigma2_s")]))

    def reporting(self, x):
        lay = self.layout
        if self.mechanism == CLUSTERING:
            return ClusterReportParams(x[lay["gamma"]])
        return PogitReportParams(float(x[lay.start("alpha0")]), x[lay["alpha"]], x[lay["delta"]],
                                 float(x[lay.start("sigma2_delta")]))

    def theta(self, x) -> np.ndarray:
        r = self.risk(x)
        eta = r.beta0 + self.X @ r.beta + r.u + r.s
        return np.exp(np.clip(eta, -self.config.clamp, self.config.clamp))

    def eps(self, x) -> np.ndarray:
        rep = self.reporting(x)
        if self.mechanism == CLUSTERING:
            return 1.0 - rep.gamma[self.labels - 1]
        return eps_pogit(rep.alpha0, rep.alpha, self.g_basis, rep.delta, self.config.clamp)

    def area_loglik(self, x) -> np.ndarray:
        y = self.data.y.astype(float)
        mu = self.e * self.theta(x) * self.eps(x)
        return y * np.log(mu) - mu - gammaln(y + 1.0)

    def log_likelihood(self, x) -> float:
        return float(self.area_loglik(x).sum())

    def log_prior(self, x) -> float:
        """Sum of all prior log-densities; ``-inf`` outside the support."""
        cfg = self.config
        r = self.risk(x)
        vv = cfg.variance_prior_var
        variances = [r.sigma2_u, r.sigma2_s]
        rep = self.reporting(x)
        if self.mechanism == POGIT:
            variances.append(rep.sigma2_delta)
        if any(not v > 0 for v in variances):
            return -math.inf
        try:
            lp_s = icar_logdensity(r.s, 1.0 / r.sigma2_s, self.graph)
        except ValueError:
            return -math.inf
        lp = (_norm_logpdf(r.beta0, cfg.beta0_mean, cfg.beta0_var)
              + _norm_logpdf(r.beta, 0.0, cfg.beta_var)
              + _norm_logpdf(r.u, 0.0, r.sigma2_u)
              + lp_s
              + sum(_half_normal_logpdf(v, vv) for v in variances))
        if self.mechanism == CLUSTERING:
            lp += gamma_logprior(rep.gamma, cfg.gamma1_upper, cfg.gamma_upper)
        else:
            lp += (_norm_logpdf(rep.alpha0, cfg.alpha0_mean, cfg.alpha0_var)
                   + _norm_logpdf(rep.alpha, 0.0, cfg.alpha_var)
                   + _norm_logpdf(rep.delta, 0.0, rep.sigma2_delta))
        return lp

    def log_posterior(self, x) -> float:
        lp = self.log_prior(x)
        if not math.isfinite(lp) or not self.config.use_likelihood:
            return lp
        return lp + self.log_likelihood(x)
