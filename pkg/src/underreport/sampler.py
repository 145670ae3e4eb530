"""Adaptive Metropolis-within-Gibbs driver, multi-chain runs and the draw store."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from . import _kernel as K
from .errors import DataValidationError, NumericalError
from .model import CLUSTERING, Model, _digest

log = logging.getLogger(__name__)

DRAW_FORMAT_VERSION = 1
THREADS_ENV = "UNDERREPORT_THREADS"


@dataclass
class SamplerConfig:
    n_chains: int = 2
    n_iter: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    seed: int = 20240101
    adapt_window: int = 50
    target_accept: float = 0.44
    check_every: int = 1_000

    @classmethod
    def paper_protocol(cls, **kw) -> "SamplerConfig":
        """Two chains of 3,000,000 sweeps, 1,000,000 burn-in, lag 3,000."""
        return cls(n_chains=2, n_iter=3_000_000, burn_in=1_000_000, thin=3_000, **kw)

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def validate(self) -> None:
        if self.n_chains < 1:
            raise DataValidationError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise DataValidationError("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise DataValidationError("thin must be >= 1")
        if self.n_draws < 2:
            raise DataValidationError("(n_iter - burn_in) / thin must leave at least 2 draws")
        if not 0 < self.target_accept < 1:
            raise DataValidationError("target_accept must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return _digest(self.to_dict())


@dataclass
class ChainDraws:
    """Thinned draws of one chain."""

    seed: int
    draws: np.ndarray          # (M, P)
    loglik: np.ndarray         # (M, A) per-area log-likelihood terms
    logpost: np.ndarray        # (M,)
    acceptance: np.ndarray     # (P,) post burn-in acceptance rate, nan if never proposed
    scales: np.ndarray         # (P,) frozen proposal scales
    max_drift: float = 0.0
    n_clamped: int = 0


@dataclass
class PosteriorDraws:
    param_names: list
    chains: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    def column(self, name) -> np.ndarray:
        """(n_chains, M) draws of one parameter."""
        j = self.param_names.index(name)
        return np.stack([c.draws[:, j] for c in self.chains])

    def pooled(self) -> np.ndarray:
        return np.concatenate([c.draws for c in self.chains])

    def pooled_loglik(self) -> np.ndarray:
        return np.concatenate([c.loglik for c in self.chains])


def _initial_scales(model: Model) -> np.ndarray:
    lay = model.layout
    sc = np.full(lay.size, 0.1)
    sc[lay["beta0"]] = 0.05
    sc[lay["beta"]] = 0.05
    if model.mechanism == CLUSTERING:
        sc[lay["gamma"]] = 0.01
    return sc


def _csr(groups: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(groups, kind="stable")
    ptr = np.zeros(n_groups + 1, dtype=np.int64)
    np.cumsum(np.bincount(groups, minlength=n_groups), out=ptr[1:])
    return ptr, order.astype(np.int64)


def _kernel_args(model: Model, cfg: SamplerConfig):
    mc, lay, data = model.config, model.layout, model.data
    n, p = data.n_areas, model.X.shape[1]
    clustering = model.mechanism == CLUSTERING
    iopt = np.array([0 if clustering else 1, int(mc.use_likelihood), cfg.n_iter, cfg.burn_in, cfg.thin,
                     cfg.adapt_window, cfg.check_every, n, p, model.k, 0 if clustering else mc.degree],
                    dtype=np.int64)
    pri = np.array([mc.beta0_mean, mc.beta0_var, mc.beta_var, mc.alpha0_mean, mc.alpha0_var, mc.alpha_var,
                    mc.variance_prior_var, mc.gamma1_upper, mc.gamma_upper, mc.clamp, cfg.target_accept])
    names = ["beta0", "beta", "sigma2_u", "sigma2_s", "u", "s"]
    off = [lay.start(nm) for nm in names]
    if clustering:
        off += [lay.start("gamma"), -1, -1, -1, -1]
    else:
        off += [-1] + [lay.start(nm) for nm in ("alpha0", "alpha", "sigma2_delta", "delta")]
    off = np.array(off, dtype=np.int64)
    y = data.y.astype(float)
    g = model.g_basis if not clustering else np.zeros((n, 1))
    labels = model.labels - 1 if clustering else np.zeros(n, dtype=np.int64)
    graph = model.graph
    nb_ptr, nb_idx = graph.csr
    comp = graph.component_labels.astype(np.int64)
    n_comp = graph.n_components
    comp_size = np.bincount(comp, minlength=n_comp).astype(float)
    cm_ptr, cm_idx = _csr(comp, n_comp)
    cl_ptr, cl_idx = _csr(labels, max(model.k, 1))
    return dict(iopt=iopt, pri=pri, off=off, y=y, lgy=gammaln(y + 1.0), loge=np.log(model.e),
                X=np.ascontiguousarray(model.X, dtype=float), G=np.ascontiguousarray(g, dtype=float),
                labels=labels.astype(np.int64), nb_ptr=nb_ptr, nb_idx=nb_idx,
                ei=graph.edges[:, 0].copy(), ej=graph.edges[:, 1].copy(), comp=comp, comp_size=comp_size,
                cm_ptr=cm_ptr, cm_idx=cm_idx, n_comp=n_comp, cl_ptr=cl_ptr, cl_idx=cl_idx)


def run_chain(cfg: SamplerConfig, model: Model, seed: int) -> ChainDraws:
    """Run one chain; identical (cfg, model, seed) give bit-identical draws."""
    cfg.validate()
    x = model.initial_state()
    lp0 = model.log_posterior(x)
    if not math.isfinite(lp0):
        raise NumericalError(f"log-posterior at the initial state is not finite ({lp0})")
    args = _kernel_args(model, cfg)
    m, P, n = cfg.n_draws, model.layout.size, model.data.n_areas
    draws = np.zeros((m, P))
    lls = np.zeros((m, n))
    lps = np.zeros(m)
    acc = np.zeros(P)
    tries = np.zeros(P)
    stats = np.zeros(4)
    scale = _initial_scales(model)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    K.run_sweeps(rng, x, scale, args["iopt"], args["pri"], args["off"], args["y"], args["lgy"],
                 args["loge"], args["X"], args["G"], args["labels"], args["nb_ptr"], args["nb_idx"],
                 args["ei"], args["ej"], args["comp"], args["comp_size"], args["cm_ptr"], args["cm_idx"],
                 args["n_comp"], args["cl_ptr"], args["cl_idx"], draws, lls, lps, acc, tries, stats)
    if stats[K.ST_BAD] > 0:
        raise NumericalError(f"cached log-posterior drifted from a fresh evaluation "
                             f"(max relative drift {stats[K.ST_DRIFT]:.3g})")
    if not np.all(np.isfinite(draws)) or not np.all(np.isfinite(lps)):
        raise NumericalError("non-finite values in the sampled chain")
    if stats[K.ST_CLAMP]:
        log.warning("exponent clamping was applied %d times (area x sweep)", int(stats[K.ST_CLAMP]))
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(tries > 0, acc / np.maximum(tries, 1), np.nan)
    return ChainDraws(seed=seed, draws=draws, loglik=lls, logpost=lps, acceptance=rate, scales=scale,
                      max_drift=float(stats[K.ST_DRIFT]), n_clamped=int(stats[K.ST_CLAMP]))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_fit(cfg: SamplerConfig, model: Model) -> PosteriorDraws:
    """Run ``cfg.n_chains`` independent chains seeded ``seed + chain_index``."""
    cfg.validate()
    seeds = [cfg.seed + c for c in range(cfg.n_chains)]
    workers = min(_threads(), cfg.n_chains)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chains = list(pool.map(lambda s: run_chain(cfg, model, s), seeds))
    else:
        chains = [run_chain(cfg, model, s) for s in seeds]
    meta = dict(seeds=seeds, sampler=cfg.to_dict(), sampler_hash=cfg.digest(),
                model_hash=model.digest(), config_hash=model.config.digest(),
                mechanism=model.mechanism)
    return PosteriorDraws(param_names=model.param_names(), chains=chains, meta=meta)


# ---------------------------------------------------------------- draw store

def _write_matrix(path: Path, header: list, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def _read_matrix(path: Path) -> tuple[list, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        rows = [[float(v) for v in line.rstrip("\n").split(",")] for line in fh if line.strip()]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def write_draws(post: PosteriorDraws, out_dir, area_ids) -> list[Path]:
    """Write ``chain_<k>.csv`` (parameters plus log-posterior),
    ``chain_<k>_loglik.csv`` (per-area log-likelihood) and ``draws.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, ch in enumerate(post.chains):
        p1 = out / f"chain_{k}.csv"
        _write_matrix(p1, list(post.param_names) + ["logpost"], np.column_stack([ch.draws, ch.logpost]))
        p2 = out / f"chain_{k}_loglik.csv"
        _write_matrix(p2, list(area_ids), ch.loglik)
        paths += [p1, p2]
    manifest = dict(format_version=DRAW_FORMAT_VERSION, n_chains=post.n_chains,
                    n_draws=int(post.chains[0].draws.shape[0]) if post.chains else 0,
                    files=[p.name for p in paths], **post.meta)
    mp = out / "draws.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths + [mp]


def read_draws(out_dir) -> PosteriorDraws:
    out = Path(out_dir)
    mp = out / "draws.json"
    if not mp.is_file():
        raise DataValidationError(f"{mp}: draw manifest not found")
    meta = json.loads(mp.read_text(encoding="utf-8"))
    if meta.get("format_version") != DRAW_FORMAT_VERSION:
        raise DataValidationError(f"{mp}: unsupported draw format {meta.get('format_version')}")
    chains, names = [], None
    for k in range(meta["n_chains"]):
        header, mat = _read_matrix(out / f"chain_{k}.csv")
        _, ll = _read_matrix(out / f"chain_{k}_loglik.csv")
        names = header[:-1]
        chains.append(ChainDraws(seed=meta["seeds"][k], draws=mat[:, :-1], loglik=ll, logpost=mat[:, -1],
                                 acceptance=np.full(len(names), np.nan), scales=np.full(len(names), np.nan)))
    keep = {k: v for k, v in meta.items() if k not in ("format_version", "n_chains", "n_draws", "files")}
    return PosteriorDraws(param_names=names, chains=chains, meta=keep)
