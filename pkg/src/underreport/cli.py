"""Command line front end: simulate, cluster, fit, compare, rerun.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .areal_data import load_dataset, write_dataset
from .clustering import merge_height_report, quality_clustering
from .diagnostics import format_table, score, summarize
from .errors import DataValidationError, NumericalError
from .model import CLUSTERING, POGIT, Model, ModelConfig
from .sampler import SamplerConfig, run_fit, write_draws
from .synthetic import SimDesign, simulate

log = logging.getLogger("underreport")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
PSRF_WARN = 1.1


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def read_cluster_labels(path, area_ids) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"area_id", "cluster_label"} <= set(reader.fieldnames):
            raise DataValidationError(f"{path}: header must contain area_id,cluster_label")
        got = {}
        for row_no, row in enumerate(reader, start=2):
            try:
                got[row["area_id"].strip()] = int(row["cluster_label"])
            except (TypeError, ValueError):
                raise DataValidationError(f"{path}: row {row_no}: bad cluster label") from None
    missing = [a for a in area_ids if a not in got]
    if missing:
        raise DataValidationError(f"{path}: no cluster label for area {missing[0]!r}")
    return np.array([got[a] for a in area_ids], dtype=np.int64)


def read_indicator_table(path):
    """area_id plus numeric indicator columns; ``q<n>`` columns are used
    when present, otherwise every non-id column."""
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or "area_id" not in header:
            raise DataValidationError(f"{path}: header must contain area_id")
        qcols = [h for h in header if h.startswith("q") and h[1:].isdigit()]
        cols = qcols or [h for h in header if h != "area_id"]
        pos = [header.index(c) for c in cols]
        ids, vals = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals.append([float(row[p]) for p in pos])
            except (ValueError, IndexError):
                raise DataValidationError(f"{path}: row {row_no}: malformed indicator values") from None
            if not np.all(np.isfinite(vals[-1])):
                raise DataValidationError(f"{path}: row {row_no}: missing indicator value")
            ids.append(row[header.index("area_id")].strip())
    return ids, np.array(vals, dtype=float)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    design = SimDesign(rows=args.rows, cols=args.cols, mechanism=args.mechanism, seed=args.seed)
    if args.design:
        with open(args.design, encoding="utf-8") as fh:
            extra = yaml.safe_load(fh) or {}
        for key, val in extra.items():
            if not hasattr(design, key):
                raise DataValidationError(f"{args.design}: unknown design key {key!r}")
            setattr(design, key, tuple(val) if isinstance(val, list) else val)
    ds, truth = simulate(design)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "areas.csv", out / "adjacency.csv")
    (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {ds.n_areas} areas to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- cluster

def cmd_cluster(args) -> int:
    ids, vals = read_indicator_table(args.indicators)
    try:
        qc, dend = quality_clustering(vals, args.k, standardize_first=not args.no_standardize)
    except ValueError as exc:
        raise DataValidationError(f"{args.indicators}: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["area_id", "cluster_label"], zip(ids, qc.labels.tolist()))
    heights = Path(args.heights) if args.heights else out.with_name(out.stem + "_heights.csv")
    _write_csv(heights, ["n_groups", "merge_height"],
               [(g, _fmt(h)) for g, h in merge_height_report(dend, args.report_depth)])
    sizes = ", ".join(str(int(s)) for s in qc.sizes)
    print(f"{args.k} groups (best to worst) sizes: {sizes}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _sampler_config(args, file_doc: dict) -> SamplerConfig:
    base = SamplerConfig.paper_protocol() if args.paper_protocol else SamplerConfig()
    for key, val in (file_doc.get("sampler") or {}).items():
        if not hasattr(base, key):
            raise DataValidationError(f"unknown sampler config key {key!r}")
        setattr(base, key, int(val) if key != "target_accept" else float(val))
    for key in ("n_chains", "n_iter", "burn_in", "thin", "seed"):
        v = getattr(args, key)
        if v is not None:
            setattr(base, key, v)
    base.validate()
    return base


def _model_config(args) -> tuple[ModelConfig, dict]:
    doc = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise DataValidationError(f"{p}: file not found")
        with open(p, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise DataValidationError(f"{p}: expected a key-value document")
    model_doc = dict(doc.get("model", {k: v for k, v in doc.items() if k != "sampler"}))
    model_doc["mechanism"] = args.model
    if args.offset:
        model_doc["offset"] = args.offset
    if args.prior_only:
        model_doc["use_likelihood"] = False
    return ModelConfig.from_dict(model_doc), doc


def _write_geojson(path_in, path_out, areas: dict) -> None:
    p = Path(path_in)
    if not p.is_file():
        raise DataValidationError(f"{p}: file not found")
    doc = json.loads(p.read_text(encoding="utf-8"))
    idx = {a: i for i, a in enumerate(areas["area_id"])}
    for feat in doc.get("features", []):
        props = feat.setdefault("properties", {})
        i = idx.get(str(props.get("area_id")))
        if i is None:
            continue
        props["rate_mean"] = float(areas["rate_per_100k"][i])
        props["eps_mean"] = float(areas["eps_mean"][i])
        props["theta_mean"] = float(areas["theta_mean"][i])
    Path(path_out).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def cmd_fit(args) -> int:
    t0 = time.time()
    mcfg, doc = _model_config(args)
    scfg = _sampler_config(args, doc)
    ds = load_dataset(args.areas, args.adjacency, allow_islands=args.allow_islands)
    for w in ds.warnings:
        log.warning(w)
    labels = None
    inputs = {"areas": args.areas, "adjacency": args.adjacency}
    if args.model == CLUSTERING:
        if args.clusters:
            labels = read_cluster_labels(args.clusters, ds.area_ids)
            inputs["clusters"] = args.clusters
        elif args.k:
            if ds.quality_indicators is None:
                raise DataValidationError(f"{args.areas}: --k needs quality indicator columns q1..qn")
            try:
                qc, _ = quality_clustering(ds.quality_indicators, args.k,
                                           standardize_first=not args.no_standardize)
            except ValueError as exc:
                raise DataValidationError(f"{args.areas}: {exc}") from None
            labels = qc.labels
        else:
            raise DataValidationError("the clustering model needs --clusters <csv> or --k <int>")
    if args.geometry:
        inputs["geometry"] = args.geometry
    model = Model(ds, mcfg, labels=labels)

    post = run_fit(scfg, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_draws(post, out / "draws", ds.area_ids)
    rows, areas = summarize(post, model)
    _write_csv(out / "summary.csv", ["param", "mean", "sd", "hpd_lo", "hpd_hi", "psrf"],
               [(r.param, _fmt(r.mean), _fmt(r.sd), _fmt(r.hpd_lo), _fmt(r.hpd_hi),
                 "" if math.isnan(r.psrf) else _fmt(r.psrf)) for r in rows])
    labels_out = areas["cluster_label"]
    _write_csv(out / "areas_summary.csv", ["area_id", "theta_mean", "eps_mean", "rate_per_100k", "cluster_label"],
               [(a, _fmt(areas["theta_mean"][i]), _fmt(areas["eps_mean"][i]), _fmt(areas["rate_per_100k"][i]),
                 "" if labels_out is None else int(labels_out[i])) for i, a in enumerate(ds.area_ids)])
    names = post.param_names
    _write_csv(out / "acceptance.csv", ["param"] + [f"chain_{k}" for k in range(post.n_chains)],
               [(nm, *(_fmt(c.acceptance[j]) for c in post.chains)) for j, nm in enumerate(names)])
    sc = None
    if mcfg.use_likelihood:
        sc = score(post)
        doc_score = dict(model=args.model, lpml=sc.lpml, cpo=sc.cpo.tolist(),
                         log_cpo=sc.log_cpo.tolist(), area_id=list(ds.area_ids),
                         config_hash=mcfg.digest(), model_hash=model.digest())
        (out / "score.json").write_text(json.dumps(doc_score, indent=1) + "\n", encoding="utf-8")
    if args.geometry:
        _write_geojson(args.geometry, out / "areas.geojson", areas)

    warn = [r.param for r in rows if not math.isnan(r.psrf) and r.psrf >= args.psrf_warn]
    for p in warn:
        log.warning("PSRF for %s is >= %.2f", p, args.psrf_warn)
    manifest = dict(
        tool="underreport", version=__version__, command="fit",
        model_config=mcfg.to_dict(), sampler_config=scfg.to_dict(),
        config_hash=mcfg.digest(), sampler_hash=scfg.digest(), model_hash=model.digest(),
        inputs={k: str(Path(v).resolve()) for k, v in inputs.items()},
        input_sha256={k: _sha256(v) for k, v in inputs.items()},
        options=dict(k=args.k, no_standardize=args.no_standardize, allow_islands=args.allow_islands,
                     psrf_warn=args.psrf_warn),
        seeds=post.meta["seeds"], wall_time_s=round(time.time() - t0, 3),
        psrf_warnings=warn, lpml=None if sc is None else sc.lpml,
        max_drift=max(c.max_drift for c in post.chains),
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    title = f"{args.model} model" + ("" if sc is None else f" (LPML={sc.lpml:.3f})")
    print(format_table(rows, title))
    return EXIT_OK


# ---------------------------------------------------------------- compare

def _load_score(d) -> dict:
    p = Path(d) / "score.json"
    if not p.is_file():
        raise DataValidationError(f"{p}: score document not found")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
        float(doc["lpml"])
    except (ValueError, KeyError, TypeError):
        raise DataValidationError(f"{p}: malformed score document") from None
    return doc


def compare_scores(a: float, b: float) -> int:
    """0 if the first is preferred, 1 for the second, -1 for a tie."""
    if a == b:
        return -1
    return 0 if a > b else 1


def cmd_compare(args) -> int:
    docs = [_load_score(d) for d in (args.run_a, args.run_b)]
    for d, doc in zip((args.run_a, args.run_b), docs):
        print(f"{doc.get('model', '?'):<12} LPML={float(doc['lpml']):.3f}  ({d})")
    pick = compare_scores(float(docs[0]["lpml"]), float(docs[1]["lpml"]))
    if pick < 0:
        print("tie: both runs have the same LPML")
    else:
        d = (args.run_a, args.run_b)[pick]
        print(f"preferred: {docs[pick].get('model', '?')} ({d}), higher LPML")
    return EXIT_OK


# ---------------------------------------------------------------- rerun

def cmd_rerun(args) -> int:
    mp = Path(args.manifest)
    if not mp.is_file():
        raise DataValidationError(f"{mp}: manifest not found")
    man = json.loads(mp.read_text(encoding="utf-8"))
    for key, path in man["inputs"].items():
        if not Path(path).is_file():
            raise DataValidationError(f"{path}: input {key} not found")
        if _sha256(path) != man["input_sha256"][key]:
            raise DataValidationError(f"{path}: input {key} changed since the recorded run")
    cfg_path = Path(args.out) / "replay_config.yaml"
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    model_doc = dict(man["model_config"])
    cfg_path.write_text(yaml.safe_dump({"model": model_doc, "sampler": man["sampler_config"]}), encoding="utf-8")
    opts = man["options"]
    argv = ["fit", "--model", model_doc["mechanism"], "--areas", man["inputs"]["areas"],
            "--adjacency", man["inputs"]["adjacency"], "--config", str(cfg_path), "--out", args.out,
            "--psrf-warn", str(opts["psrf_warn"])]
    if "clusters" in man["inputs"]:
        argv += ["--clusters", man["inputs"]["clusters"]]
    elif opts.get("k"):
        argv += ["--k", str(opts["k"])]
    if "geometry" in man["inputs"]:
        argv += ["--geometry", man["inputs"]["geometry"]]
    if opts.get("no_standardize"):
        argv.append("--no-standardize")
    if opts.get("allow_islands"):
        argv.append("--allow-islands")
    return main(argv)


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="underreport", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic lattice dataset")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--mechanism", choices=[CLUSTERING, POGIT], default=CLUSTERING)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--design", help="YAML overrides for SimDesign fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", help="Ward data-quality groups")
    p.add_argument("--indicators", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heights", help="merge-height report (default <out>_heights.csv)")
    p.add_argument("--report-depth", type=int, default=30)
    p.add_argument("--no-standardize", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit", help="fit a model by MCMC and write summaries")
    p.add_argument("--model", choices=[CLUSTERING, POGIT], required=True)
    p.add_argument("--areas", required=True)
    p.add_argument("--adjacency", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--clusters", help="CSV area_id,cluster_label")
    g.add_argument("--k", type=int, help="cluster the q* indicator columns into K groups")
    p.add_argument("--config", help="YAML/JSON document with 'model' and optional 'sampler' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--offset", choices=["expected", "population"])
    p.add_argument("--n-chains", dest="n_chains", type=int)
    p.add_argument("--n-iter", dest="n_iter", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-protocol", action="store_true",
                   help="2 chains x 3,000,000 sweeps, burn-in 1,000,000, thin 3,000")
    p.add_argument("--prior-only", action="store_true", help="switch the likelihood off")
    p.add_argument("--allow-islands", action="store_true")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--geometry", help="GeoJSON with an area_id property per feature")
    p.add_argument("--psrf-warn", dest="psrf_warn", type=float, default=PSRF_WARN)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="compare two fitted runs by LPML")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("rerun", help="repeat a fit from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
