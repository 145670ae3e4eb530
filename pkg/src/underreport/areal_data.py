"""Areal count data: ingestion, validation, offsets and incidence rates."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DataValidationError

_INDICATOR_RE = re.compile(r"^q\d+$")
RESERVED = ("area_id", "y", "n_pop")


class Graph:
    """Undirected adjacency graph on ``n`` nodes with a CSR neighbour index."""

    def __init__(self, n: int, edges: np.ndarray):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise DataValidationError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            i = int(edges[edges[:, 0] == edges[:, 1]][0, 0])
            raise DataValidationError(f"self-loop on node {i}")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        canon = np.stack([lo, hi], axis=1)
        uniq = np.unique(canon, axis=0)
        if len(uniq) != len(canon):
            raise DataValidationError("duplicate edge in adjacency")
        self.n = int(n)
        self.edges = canon

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) of the symmetric neighbour lists, sorted per node."""
        both = np.concatenate([self.edges, self.edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(both[:, 0], minlength=self.n), out=indptr[1:])
        return indptr, both[:, 1].copy()

    def neighbors(self, i: int) -> np.ndarray:
        indptr, idx = self.csr
        return idx[indptr[i]:indptr[i + 1]]

    @cached_property
    def _components(self) -> tuple[int, np.ndarray]:
        m = coo_matrix(
            (np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])),
            shape=(self.n, self.n),
        )
        return connected_components(m, directed=False)

    @property
    def n_components(self) -> int:
        return int(self._components[0])

    @property
    def component_labels(self) -> np.ndarray:
        return self._components[1]

    @property
    def islands(self) -> np.ndarray:
        return np.flatnonzero(self.degree == 0)

    def laplacian(self) -> np.ndarray:
        """Dense ``D - W``; only meant for small graphs."""
        q = np.zeros((self.n, self.n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        q[i, j] = q[j, i] = -1.0
        q[np.diag_indices(self.n)] = self.degree
        return q


@dataclass
class ArealDataset:
    """Per-area counts, populations, covariates and adjacency.

    ``covariates_raw`` keeps the values as read; ``covariates`` is the
    mean-centred design used by the models.
    """

    area_ids: list[str]
    y: np.ndarray
    n_pop: np.ndarray
    covariates_raw: np.ndarray
    covariate_names: list[str]
    graph: Graph
    proxy_w: Optional[np.ndarray] = None
    quality_indicators: Optional[np.ndarray] = None
    indicator_names: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.n_pop = np.asarray(self.n_pop, dtype=np.int64)
        self.covariates_raw = np.asarray(self.covariates_raw, dtype=float).reshape(len(self.y), -1)
        self.validate()

    @property
    def n_areas(self) -> int:
        return len(self.area_ids)

    @cached_property
    def covariate_means(self) -> np.ndarray:
        return self.covariates_raw.mean(axis=0)

    @cached_property
    def covariates(self) -> np.ndarray:
        return self.covariates_raw - self.covariate_means

    @cached_property
    def index(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.area_ids)}

    def validate(self) -> None:
        a = len(self.area_ids)
        if len(set(self.area_ids)) != a:
            seen = set()
            dup = next(x for x in self.area_ids if x in seen or seen.add(x))
            raise DataValidationError(f"area {dup!r} appears more than once")
        if self.y.shape != (a,) or self.n_pop.shape != (a,):
            raise DataValidationError("count/population length does not match number of areas")
        if self.covariates_raw.shape[0] != a:
            raise DataValidationError("covariate row count does not match number of areas")
        if self.graph.n != a:
            raise DataValidationError("graph size does not match number of areas")
        if np.any(self.y < 0):
            i = int(np.flatnonzero(self.y < 0)[0])
            raise DataValidationError(f"negative count for area {self.area_ids[i]!r}")
        if np.any(self.n_pop < 1):
            i = int(np.flatnonzero(self.n_pop < 1)[0])
            raise DataValidationError(f"population < 1 for area {self.area_ids[i]!r}")
        for name, arr in (("covariates", self.covariates_raw),
                          ("w", self.proxy_w), ("indicators", self.quality_indicators)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataValidationError(f"missing or non-finite values in {name}")

    def subset(self, keep: Sequence[str]) -> "ArealDataset":
        """Restrict to ``keep`` areas; edges to dropped areas vanish and
        covariate centring is recomputed on the subset."""
        idx = np.array([self.index[k] for k in keep], dtype=np.int64)
        remap = -np.ones(self.n_areas, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        e = remap[self.graph.edges]
        e = e[(e >= 0).all(axis=1)]
        return ArealDataset(
            area_ids=[self.area_ids[i] for i in idx],
            y=self.y[idx],
            n_pop=self.n_pop[idx],
            covariates_raw=self.covariates_raw[idx],
            covariate_names=list(self.covariate_names),
            graph=Graph(len(idx), e),
            proxy_w=None if self.proxy_w is None else self.proxy_w[idx],
            quality_indicators=None if self.quality_indicators is None
            else self.quality_indicators[idx],
            indicator_names=list(self.indicator_names),
        )


def _parse_float(text: str, path, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataValidationError(f"{path}: row {row}: column {col!r}: not a number: {text!r}") from None
    if not np.isfinite(v):
        raise DataValidationError(f"{path}: row {row}: column {col!r}: missing value")
    return v


def _parse_int(text: str, path, row: int, col: str) -> int:
    v = _parse_float(text, path, row, col)
    if v != int(v):
        raise DataValidationError(f"{path}: row {row}: column {col!r}: expected an integer, got {text!r}")
    return int(v)


def read_areas(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        for col in RESERVED:
            if col not in header:
                raise DataValidationError(f"{path}: header lacks required column {col!r}")
        cov_cols = [h for h in header if h not in RESERVED and h != "w" and not _INDICATOR_RE.match(h)]
        ind_cols = [h for h in header if _INDICATOR_RE.match(h)]
        pos = {h: k for k, h in enumerate(header)}
        ids, y, n, cov, w, ind = [], [], [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"{path}: row {row_no}: expected {len(header)} fields, got {len(row)}")
            if any(cell.strip() == "" for cell in row):
                raise DataValidationError(f"{path}: row {row_no}: missing value")
            ids.append(row[pos["area_id"]].strip())
            y.append(_parse_int(row[pos["y"]], path, row_no, "y"))
            n.append(_parse_int(row[pos["n_pop"]], path, row_no, "n_pop"))
            cov.append([_parse_float(row[pos[c]], path, row_no, c) for c in cov_cols])
            if "w" in pos:
                w.append(_parse_float(row[pos["w"]], path, row_no, "w"))
            ind.append([_parse_float(row[pos[c]], path, row_no, c) for c in ind_cols])
    if not ids:
        raise DataValidationError(f"{path}: no data rows")
    return dict(
        area_ids=ids,
        y=np.array(y, dtype=np.int64),
        n_pop=np.array(n, dtype=np.int64),
        covariates_raw=np.array(cov, dtype=float).reshape(len(ids), len(cov_cols)),
        covariate_names=cov_cols,
        proxy_w=np.array(w) if "w" in pos else None,
        quality_indicators=np.array(ind).reshape(len(ids), len(ind_cols)) if ind_cols else None,
        indicator_names=ind_cols,
    )


def read_edges(path, index: dict[str, int]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"{path}: file not found")
    edges = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["area_a", "area_b"]:
            raise DataValidationError(f"{path}: header must be 'area_a,area_b'")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataValidationError(f"{path}: row {row_no}: expected 2 fields, got {len(row)}")
            a, b = row[0].strip(), row[1].strip()
            for name in (a, b):
                if name not in index:
                    raise DataValidationError(f"{path}: row {row_no}: unknown area {name!r}")
            if a == b:
                raise DataValidationError(f"{path}: row {row_no}: self-loop on area {a!r}")
            key = (min(index[a], index[b]), max(index[a], index[b]))
            if key in seen:
                raise DataValidationError(f"{path}: row {row_no}: duplicate edge ({a}, {b})")
            seen.add(key)
            edges.append((index[a], index[b]))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def load_dataset(areas_path, adjacency_path, allow_islands: bool = False) -> ArealDataset:
    """Read and validate an areas CSV and an adjacency CSV.

    Areas without neighbours are rejected unless ``allow_islands`` is set,
    in which case they are recorded in ``dataset.warnings`` and the models
    carry no spatial effect for them.
    """
    cols = read_areas(areas_path)
    index = {a: i for i, a in enumerate(cols["area_ids"])}
    if len(index) != len(cols["area_ids"]):
        raise DataValidationError(f"{areas_path}: duplicate area_id")
    edges = read_edges(adjacency_path, index)
    ds = ArealDataset(graph=Graph(len(index), edges), **cols)
    islands = [ds.area_ids[i] for i in ds.graph.islands]
    if islands:
        msg = f"{len(islands)} area(s) without neighbours: {', '.join(islands[:10])}"
        if not allow_islands:
            raise DataValidationError(f"{adjacency_path}: {msg} (use --allow-islands to keep them)")
        ds.warnings.append(msg)
    return ds


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: ArealDataset, areas_path, adjacency_path) -> None:
    header = ["area_id", "y", "n_pop", *ds.covariate_names]
    if ds.proxy_w is not None:
        header.append("w")
    header += ds.indicator_names
    with open(areas_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i, a in enumerate(ds.area_ids):
            row = [a, int(ds.y[i]), int(ds.n_pop[i])]
            row += [_fmt(v) for v in ds.covariates_raw[i]]
            if ds.proxy_w is not None:
                row.append(_fmt(ds.proxy_w[i]))
            if ds.quality_indicators is not None:
                row += [_fmt(v) for v in ds.quality_indicators[i]]
            wr.writerow(row)
    with open(adjacency_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["area_a", "area_b"])
        for i, j in ds.graph.edges:
            wr.writerow([ds.area_ids[i], ds.area_ids[j]])


def compute_expected_counts(dataset: ArealDataset) -> np.ndarray:
    """Naive expected counts ``E_i = N_i * sum(Y) / sum(N)``."""
    total = int(dataset.y.sum())
    if total <= 0:
        raise DataValidationError("all counts are zero; expected counts are undefined")
    n = dataset.n_pop.astype(float)
    return n * (total / n.sum())


def incidence_rate(theta, e, n_pop) -> np.ndarray:
    """Cases per 100,000 inhabitants implied by relative risks ``theta``."""
    theta, e, n_pop = (np.asarray(v, dtype=float) for v in (theta, e, n_pop))
    if not (theta.shape == e.shape == n_pop.shape):
        raise ValueError("theta, e and n_pop must have equal lengths")
    return 100000.0 * e * theta / n_pop
