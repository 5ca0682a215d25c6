"""
Experiment runners behind the command line: convergence studies, rank
traces, the planesource problem and the padding robustness sweep.

Each runner takes a config dict (see `DEFAULTS`), returns its rows and,
if ``config["output"]`` is set, writes CSV files whose first line is
``# config_sha256=<hash>``. Wall-clock times go to a separate
``timings.csv`` so the result files are reproducible byte for byte.
"""

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path as FsPath

import numpy as np
from scipy.linalg import expm

from . import models
from .operators import SumOfProductsOperator
from .tensor_core import crandn
from .ttn import Leaf, Node, contract_full, postorder, random_ttn, save_ttn, tree_from_nested
from .ttn_integrator import StepConfig, integrate

DEFAULTS = {
    "model": "ising",
    "params": {},
    "tree": None,
    "mode": "both",
    "h": [0.1, 0.05, 0.025, 0.0125],
    "T": 1.0,
    "theta": 1e-8,
    "relative": False,
    "c": 10.0,
    "reject": False,
    "max_rank": None,
    "substeps": 1,
    "seed": 0,
    "initial_rank": 2,
    "pad": 0.0,
    "pads": [1e-8, 1e-11, 1e-14],
    "reference": True,
    "zero_field": False,
    "output": None,
}

MODES = ("parallel", "rank_adaptive")


def load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def resolve(cfg: dict) -> dict:
    """Fill defaults and validate."""
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    out = {**DEFAULTS, **cfg}
    if isinstance(out["h"], (int, float)):
        out["h"] = [out["h"]]
    if not out["h"] or any(h <= 0 for h in out["h"]):
        raise ValueError("h list must be non-empty and positive")
    if out["T"] <= 0:
        raise ValueError("T must be positive")
    if out["mode"] not in MODES + ("both",):
        raise ValueError(f"unknown mode {out['mode']!r}")
    if out["model"] not in ("ising", "planesource", "synthetic-matrix", "synthetic-tucker"):
        raise ValueError(f"unknown model {out['model']!r}")
    return out


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON config; the output location is not part of the experiment."""
    blob = json.dumps({k: v for k, v in cfg.items() if k != "output"}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def modes_of(cfg):
    return MODES if cfg["mode"] == "both" else (cfg["mode"],)


def worker_count() -> int:
    """Worker budget from ``TTNBUG_WORKERS``, defaulting to the available CPUs."""
    env = os.environ.get("TTNBUG_WORKERS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("TTNBUG_WORKERS must be positive")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@contextmanager
def executor_for(workers=None):
    n = worker_count() if workers is None else workers
    if n <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=n) as ex:
        yield ex


def write_csv(path, cfg, fields, rows):
    path = FsPath(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={config_hash(cfg)}\n")
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _emit(cfg, name, fields, rows):
    if cfg.get("output"):
        write_csv(FsPath(cfg["output"]) / name, cfg, fields, rows)


def _emit_timings(cfg, run, rows):
    if cfg.get("output") and rows:
        path = FsPath(cfg["output"]) / "timings.csv"
        new = not path.exists()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["run", "integrator", "subflow", "seconds"])
            for r in rows:
                w.writerow([run] + list(r))


def _snapshot(cfg, mode, y):
    """Final state as ``final_<mode>.npz``, loadable with `load_ttn` for restarts."""
    if cfg.get("output"):
        FsPath(cfg["output"]).mkdir(parents=True, exist_ok=True)
        save_ttn(FsPath(cfg["output"]) / f"final_{mode}.npz", y)


def node_label(path) -> str:
    return "root" if path == () else ".".join(str(i) for i in path)


def log_slope(hs, errs) -> float:
    hs, errs = np.asarray(hs, float), np.asarray(errs, float)
    ok = errs > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(hs[ok]), np.log(errs[ok]), 1)[0])


# --- problems ---------------------------------------------------------------

class Problem:
    """Field, tree, initial data and (optionally) a dense reference."""

    def __init__(self, op, y0, oracle=None, meta=None):
        self.op = op
        self.y0 = y0
        self.oracle = oracle
        self.meta = meta or {}


def _random_sop(dims, nterms, rng, hermitian=False):
    op = SumOfProductsOperator(dims)
    for _ in range(nterms):
        modes = rng.choice(len(dims), size=min(2, len(dims)), replace=False)
        factors = {}
        for l in modes:
            m = crandn((dims[l], dims[l]), rng) / np.sqrt(dims[l])
            factors[int(l)] = (m + m.conj().T) / 2 if hermitian else m
        op.add_term(factors, 1.0)
    return op


def build_problem(cfg, pad=None) -> Problem:
    """Problem for the configured model; `pad` overrides the configured padding."""
    model = cfg["model"]
    pad = cfg["pad"] if pad is None else pad
    prm = dict(cfg["params"])
    rng = np.random.default_rng(cfg["seed"])
    if model == "ising":
        p = models.IsingParams(**prm) if prm else models.IsingParams(6)
        tree = tree_from_nested(cfg["tree"], [2] * p.d) if cfg["tree"] else models.ising_tree(p.d)
        y0 = models.all_up_state(tree, cfg["initial_rank"], pad, seed=cfg["seed"])
        op = models.ising_operator(p)
        if cfg["zero_field"]:
            op = op.scaled(0.0)
        oracle = None
        if p.d <= 14:
            psi0 = contract_full(y0)
            oracle = (lambda t: psi0) if cfg["zero_field"] else (lambda t: models.exact_evolve(p, psi0, t))
        return Problem(op, y0, oracle, {"ising": p})
    if model == "planesource":
        p = models.PlanesourceParams(**prm)
        y0 = models.planesource_initial(p, cfg["initial_rank"], pad, seed=cfg["seed"])
        op = models.planesource_operator(p)
        return Problem(op, y0, None, {"planesource": p})
    # synthetic problems: random sum-of-products field with a dense exponential as reference
    if model == "synthetic-matrix":
        dims = tuple(prm.get("dims", (6, 5)))
        tree = Node((Leaf(0, dims[0]), Leaf(1, dims[1])))
    else:
        dims = tuple(prm.get("dims", (4, 3, 5)))
        tree = Node(tuple(Leaf(i, n) for i, n in enumerate(dims)))
    op = _random_sop(dims, prm.get("nterms", 4), rng, hermitian=prm.get("hermitian", False))
    if prm.get("hermitian", False):
        op = op.scaled(-1j)
    if cfg["zero_field"]:
        op = op.scaled(0.0)
    y0 = random_ttn(tree, prm.get("rank", 2), rng)
    dense = op.to_dense()
    v0 = contract_full(y0).reshape(-1, order="F")
    return Problem(op, y0, lambda t: (expm(dense * t) @ v0).reshape(dims, order="F"))


def step_config(cfg, h, mode) -> StepConfig:
    return StepConfig(tolerance=cfg["theta"], h=h, c=cfg["c"], max_rank=cfg["max_rank"],
                      substeps=cfg["substeps"], mode=mode, reject=cfg["reject"],
                      relative=cfg["relative"])


def _timing_rows(mode, reports):
    tot = {}
    for r in reports:
        for k, v in r.wall_times.items():
            key = "phi" if k.startswith("phi") else "psi" if k.startswith("psi") else k
            tot[key] = tot.get(key, 0.0) + v
    return [(mode, k, f"{v:.6f}") for k, v in sorted(tot.items())]


# --- runners ----------------------------------------------------------------

def run_convergence(cfg: dict, workers=None):
    """
    Error against the dense reference at time ``T`` for each step size.
    Writes ``convergence.csv`` (integrator, h, error) and
    ``convergence_slopes.csv`` (integrator, slope).
    """
    cfg = resolve(cfg)
    prob = build_problem(cfg)
    if prob.oracle is None:
        raise ValueError(f"model {cfg['model']!r} has no dense reference at this size")
    ref = prob.oracle(cfg["T"])
    rows, slopes, timings = [], [], []
    with executor_for(workers) as ex:
        for mode in modes_of(cfg):
            errs = []
            for h in cfg["h"]:
                y, reps = integrate(prob.y0, prob.op, 0.0, cfg["T"], step_config(cfg, h, mode), ex)
                approx = contract_full(y)
                if approx.shape != ref.shape:
                    raise ValueError(f"state shape {approx.shape} does not match reference {ref.shape}")
                err = float(np.linalg.norm(approx - ref))
                errs.append(err)
                rows.append({"integrator": mode, "h": float(h), "error": err})
                timings += [(f"h={h}",) + t for t in _timing_rows(mode, reps)]
            slopes.append({"integrator": mode, "slope": log_slope(cfg["h"], errs)})
    _emit(cfg, "convergence.csv", ["integrator", "h", "error"], rows)
    _emit(cfg, "convergence_slopes.csv", ["integrator", "slope"], slopes)
    _emit_timings(cfg, "convergence", [(t[1], f"{t[0]}:{t[2]}", t[3]) for t in timings])
    return rows, slopes


def run_rank_trace(cfg: dict, workers=None):
    """
    Per-step, per-node ranks and η values. Writes ``ranktrace.csv``
    (integrator, t, node_path, rank, eta, rejected).
    """
    cfg = resolve(cfg)
    prob = build_problem(cfg)
    h = cfg["h"][0]
    rows, timings = [], []
    with executor_for(workers) as ex:
        for mode in modes_of(cfg):
            def record(t, y, rep, mode=mode):
                for path, _ in postorder(y.tree):
                    rows.append({"integrator": mode, "t": float(t), "node_path": node_label(path),
                                 "rank": rep.new_ranks[path], "eta": float(rep.eta.get(path, 0.0)),
                                 "rejected": int(rep.rejected)})
            for path, _ in postorder(prob.y0.tree):
                rows.append({"integrator": mode, "t": 0.0, "node_path": node_label(path),
                             "rank": prob.y0.rank(path), "eta": 0.0, "rejected": 0})
            y, reps = integrate(prob.y0, prob.op, 0.0, cfg["T"], step_config(cfg, h, mode), ex, record)
            _snapshot(cfg, mode, y)
            timings += _timing_rows(mode, reps)
    _emit(cfg, "ranktrace.csv", ["integrator", "t", "node_path", "rank", "eta", "rejected"], rows)
    _emit_timings(cfg, "ranktrace", timings)
    return rows


def run_planesource(cfg: dict, workers=None):
    """
    Expected scalar flux and its variance at ``T`` for each integrator,
    with the collocation reference if ``reference`` is set. Writes
    ``planesource.csv`` (per cell) and ``planesource_summary.csv``.
    The step size is ``cfl * dx`` unless ``h`` is given explicitly.
    """
    if "h" not in cfg:
        cfg = {**cfg, "h": [models.PlanesourceParams(**cfg.get("params", {})).h]}
    cfg = resolve({**cfg, "model": "planesource"})
    prob = build_problem(cfg)
    p = prob.meta["planesource"]
    h = cfg["h"][0]
    cols = {"x": p.x}
    summary, timings = [], []
    ref_mean = None
    if cfg["reference"]:
        ref_mean, ref_var, _ = models.collocation_reference(p, cfg["T"])
        cols["mean_reference"], cols["var_reference"] = ref_mean, ref_var
        summary.append({"integrator": "reference", "mass": models.mass(ref_mean, p),
                        "rel_l2_mean": 0.0, "max_rank": ""})
    with executor_for(workers) as ex:
        for mode in modes_of(cfg):
            y, reps = integrate(prob.y0, prob.op, 0.0, cfg["T"], step_config(cfg, h, mode), ex)
            _snapshot(cfg, mode, y)
            mean, var = models.scalar_flux_stats(y, p)
            cols[f"mean_{mode}"], cols[f"var_{mode}"] = mean, var
            rel = float(np.linalg.norm(mean - ref_mean) / np.linalg.norm(ref_mean)) if ref_mean is not None else float("nan")
            summary.append({"integrator": mode, "mass": models.mass(mean, p), "rel_l2_mean": rel,
                            "max_rank": max(max(r.new_ranks.values()) for r in reps)})
            timings += _timing_rows(mode, reps)
    fields = list(cols)
    rows = [{k: float(cols[k][i]) for k in fields} for i in range(p.n_x)]
    _emit(cfg, "planesource.csv", fields, rows)
    _emit(cfg, "planesource_summary.csv", ["integrator", "mass", "rel_l2_mean", "max_rank"], summary)
    _emit_timings(cfg, "planesource", timings)
    return rows, summary


def run_robustness(cfg: dict, workers=None):
    """
    Convergence sweep with initial data padded by directions of weight
    ``pads`` (and unpadded, pad 0). Writes ``robustness.csv``
    (integrator, pad, h, error) and ``robustness_summary.csv``
    (integrator, pad, slope, max_ratio_to_unpadded).
    """
    cfg = resolve(cfg)
    rows, summary = [], []
    with executor_for(workers) as ex:
        for mode in modes_of(cfg):
            base = None
            for pad in [0.0] + list(cfg["pads"]):
                prob = build_problem(cfg, pad=pad)
                if prob.oracle is None:
                    raise ValueError("robustness sweep needs a dense reference")
                ref = prob.oracle(cfg["T"])
                errs = []
                for h in cfg["h"]:
                    y, _ = integrate(prob.y0, prob.op, 0.0, cfg["T"], step_config(cfg, h, mode), ex)
                    errs.append(float(np.linalg.norm(contract_full(y) - ref)))
                    rows.append({"integrator": mode, "pad": float(pad), "h": float(h), "error": errs[-1]})
                if base is None:
                    base = errs
                ratio = max(max(e / b, b / e) if min(e, b) > 0 else float("inf") for e, b in zip(errs, base))
                summary.append({"integrator": mode, "pad": float(pad), "slope": log_slope(cfg["h"], errs),
                                "max_ratio_to_unpadded": float(ratio)})
    _emit(cfg, "robustness.csv", ["integrator", "pad", "h", "error"], rows)
    _emit(cfg, "robustness_summary.csv", ["integrator", "pad", "slope", "max_ratio_to_unpadded"], summary)
    return rows, summary


RUNNERS = {
    "convergence": run_convergence,
    "ranktrace": run_rank_trace,
    "planesource": run_planesource,
    "robustness": run_robustness,
}
