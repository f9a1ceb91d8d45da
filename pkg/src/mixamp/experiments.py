"""Config-driven experiment runner: sweeps, heatmaps, intercept estimation.

A JSON config describes one experiment family; running it produces a
long-format CSV of per-(repeat, iteration, signal) metrics together with a
JSON manifest that echoes the config, the master seed, and the package
version. Re-running from the manifest reproduces the CSV byte for byte;
per-task seeds are derived from (master seed, grid index, repeat index) so
parallel and serial execution give identical results.
"""

from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .amp import run_amp
from .channels import (
    MaxAffineChannel,
    MixedLinearChannel,
    MixtureOfExpertsChannel,
    generate_instance,
)
from .em import run_em_amp, run_oracle_amp
from .priors import GaussianPrior, SparseDiscretePrior
from .state_evolution import initial_metrics, run_se
from .validation import DivergedRunError, NumericalFailureError


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


CSV_COLUMNS = [
    "model", "prior", "denoiser", "delta", "sigma", "rho_or_eps", "alpha",
    "repeat", "iter", "signal", "corr_emp", "mse_emp", "corr_se", "mse_se",
    "status", "label_acc",
]

HEATMAP_COLUMNS = [
    "model", "prior", "denoiser", "delta", "sigma", "rho_or_eps", "alpha",
    "repeats", "min_corr_mean", "status",
]

_SECTION_KEYS = {
    "": {"model", "prior", "denoiser", "p", "deltas", "iterations", "repeats",
         "seed", "mc", "em", "grid", "out_prefix"},
    "model": {"kind", "alpha", "alphas", "intercepts", "sigma"},
    "prior": {"kind", "mean", "cov", "rho", "eps"},
    "denoiser": {"kind", "zeta", "alpha_hat"},
    "mc": {"se_samples", "g_samples", "ez_samples"},
    "em": {"m_max", "k_max", "warm_start", "oracle", "m_step_iters"},
    "grid": {"eps"},
}


def _check_keys(section, mapping):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {section or 'top level'!r} must be an object")
    unknown = set(mapping) - _SECTION_KEYS[section]
    if unknown:
        raise ConfigError(f"unknown keys in {section or 'top level'}: {sorted(unknown)}")


def validate_config(cfg: dict) -> dict:
    _check_keys("", cfg)
    for key in ("model", "prior", "denoiser"):
        if key not in cfg:
            raise ConfigError(f"missing required section {key!r}")
        _check_keys(key, cfg[key])
    for key in ("mc", "em", "grid"):
        if key in cfg:
            _check_keys(key, cfg[key])
    if "p" not in cfg or int(cfg["p"]) < 1:
        raise ConfigError("p must be a positive integer")
    if "deltas" not in cfg or not cfg["deltas"]:
        raise ConfigError("deltas must be a non-empty list")
    if int(cfg.get("repeats", 1)) < 1:
        raise ConfigError("repeats must be >= 1")
    kind = cfg["model"].get("kind")
    if kind not in ("mlr2", "mlr3", "mar", "moe"):
        raise ConfigError(f"unknown model kind: {kind!r}")
    dkind = cfg["denoiser"].get("kind", "bayes")
    if dkind not in ("bayes", "soft-threshold", "mismatched"):
        raise ConfigError(f"unknown denoiser kind: {dkind!r}")
    if dkind == "mismatched" and kind not in ("mlr2",):
        raise ConfigError("mismatched weights are defined for the two-component mixture")
    return cfg


def build_channel(cfg: dict):
    model = cfg["model"]
    kind = model["kind"]
    sigma = float(model.get("sigma", 0.0))
    if kind == "mlr2":
        alpha = float(model.get("alpha", 0.5))
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        return MixedLinearChannel((alpha, 1.0 - alpha), sigma)
    if kind == "mlr3":
        alphas = model.get("alphas")
        if alphas is None or len(alphas) != 3:
            raise ConfigError("mlr3 needs three mixture weights")
        return MixedLinearChannel(tuple(float(a) for a in alphas), sigma)
    if kind == "mar":
        intercepts = model.get("intercepts")
        if intercepts is None or len(intercepts) != 2:
            raise ConfigError("mar needs two intercepts")
        return MaxAffineChannel(tuple(float(b) for b in intercepts), sigma)
    return MixtureOfExpertsChannel(sigma)


def build_prior(cfg: dict, n_signals: int):
    prior = cfg["prior"]
    kind = prior.get("kind")
    if kind == "gaussian":
        if "rho" in prior:
            if n_signals != 2:
                raise ConfigError("rho shorthand needs exactly two signals")
            rho = float(prior["rho"])
            mean = np.zeros(2)
            cov = np.array([[1.0, rho], [rho, 1.0]])
        else:
            mean = np.asarray(prior.get("mean", np.zeros(n_signals)), dtype=float)
            cov = np.asarray(prior.get("cov", np.eye(n_signals)), dtype=float)
        if mean.size != n_signals:
            raise ConfigError(f"prior mean must have {n_signals} entries")
        return GaussianPrior(mean=mean, cov=cov)
    if kind == "sparse":
        return SparseDiscretePrior(eps=float(prior.get("eps", 0.1)),
                                   n_signals=n_signals)
    raise ConfigError(f"unknown prior kind: {kind!r}")


def _rho_or_eps(cfg) -> float:
    prior = cfg["prior"]
    if prior.get("kind") == "sparse":
        return float(prior.get("eps", 0.1))
    if "rho" in prior:
        return float(prior["rho"])
    cov = np.asarray(prior.get("cov", [[1.0]]), dtype=float)
    return float(cov[0, 1]) if cov.shape[0] > 1 else 0.0


def _alpha_field(cfg) -> str:
    model = cfg["model"]
    if model["kind"] == "mlr2":
        return _fmt(float(model.get("alpha", 0.5)))
    if model["kind"] == "mlr3":
        return _fmt(float(model["alphas"][0]))
    return ""


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def task_seed(master_seed: int, grid_index: int, repeat_index: int) -> int:
    ss = np.random.SeedSequence((int(master_seed), int(grid_index), int(repeat_index)))
    return int(ss.generate_state(1)[0])


def estimate_labels(x, y, signals_hat, channel):
    """Branch assignment minimizing the per-row squared residual.

    Ties resolve to the smallest branch index.
    """
    theta = np.asarray(x) @ np.asarray(signals_hat)
    if isinstance(channel, MaxAffineChannel):
        theta = theta + np.asarray(channel.intercepts)
    resid = (np.asarray(y, dtype=float)[:, None] - theta) ** 2
    return np.argmin(resid, axis=1)


def label_accuracy(true_labels, estimated_labels, n_branches: int) -> float:
    """Accuracy maximized over branch relabelings."""
    true_labels = np.asarray(true_labels)
    estimated_labels = np.asarray(estimated_labels)
    best = 0.0
    for perm in itertools.permutations(range(n_branches)):
        mapped = np.asarray(perm)[estimated_labels]
        best = max(best, float(np.mean(mapped == true_labels)))
    return best


@dataclass
class SweepOutput:
    csv_path: Path
    manifest_path: Path
    n_failures: int


def _denoiser_kwargs(cfg):
    den = cfg["denoiser"]
    kind = den.get("kind", "bayes")
    if kind == "mismatched":
        alpha_hat = float(den.get("alpha_hat", 0.5))
        return "bayes", None, (alpha_hat, 1.0 - alpha_hat)
    if kind == "soft-threshold":
        return "soft-threshold", float(den.get("zeta", 1.1402)), None
    return "bayes", None, None


def _mc_settings(cfg):
    mc = cfg.get("mc", {})
    return {
        "se_samples": mc.get("se_samples"),
        "g_samples": int(mc.get("g_samples", 1000)),
        "ez_samples": int(mc.get("ez_samples", 4000)),
    }


def _se_curve(cfg, channel, prior, delta, iterations, seed):
    kind, zeta, weights_assumed = _denoiser_kwargs(cfg)
    mc = _mc_settings(cfg)
    se = run_se(prior, channel, delta, iterations=iterations, denoiser=kind,
                zeta=zeta, mc_samples=mc["se_samples"], seed=seed,
                weights_assumed=weights_assumed, mc_inner=mc["g_samples"])
    return se.corr, se.mse


def _amp_repeat(cfg, channel, prior, delta, repeat_seed):
    p = int(cfg["p"])
    n = int(round(delta * p))
    iterations = int(cfg.get("iterations", 10))
    kind, zeta, weights_assumed = _denoiser_kwargs(cfg)
    mc = _mc_settings(cfg)
    instance = generate_instance(channel, prior, n, p, seed=repeat_seed)
    run = run_amp(instance, prior, channel, denoiser=kind, zeta=zeta,
                  iterations=iterations, seed=repeat_seed,
                  mc_samples=mc["g_samples"], weights_assumed=weights_assumed)
    if isinstance(channel, (MixedLinearChannel, MaxAffineChannel)):
        est = estimate_labels(instance.x, instance.y, run.state.b_hat, channel)
        acc = label_accuracy(instance.labels, est, channel.n_signals)
    else:
        acc = None
    return run, acc


def run_sweep(cfg: dict, out_dir, threads: int = 1):
    """Execute every (delta, repeat) cell of a sweep config.

    Divergent repeats are recorded in the status column rather than
    dropped; with ``strict`` the failure count is surfaced in the return
    value for the caller to turn into an exit code.
    """
    cfg = validate_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channel = build_channel(cfg)
    prior = build_prior(cfg, channel.n_signals)
    deltas = [float(d) for d in cfg["deltas"]]
    repeats = int(cfg.get("repeats", 1))
    iterations = int(cfg.get("iterations", 10))
    master_seed = int(cfg.get("seed", 0))
    n_sig = channel.n_signals

    def se_task(gi):
        delta = deltas[gi]
        try:
            corr, mse = _se_curve(cfg, channel, prior, delta, iterations,
                                  task_seed(master_seed, gi, 10**6))
            return corr, mse, "ok"
        except (NumericalFailureError, ValueError):
            zeros = np.zeros((iterations + 1, n_sig))
            return zeros, zeros, "se-failed"

    def amp_task(gi, ri):
        try:
            run, acc = _amp_repeat(cfg, channel, prior, deltas[gi],
                                   task_seed(master_seed, gi, ri))
            return run, acc, "ok"
        except DivergedRunError as err:
            return None, None, f"diverged@{err.iteration}"

    tasks = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        se_futures = {gi: pool.submit(se_task, gi) for gi in range(len(deltas))}
        amp_futures = {(gi, ri): pool.submit(amp_task, gi, ri)
                       for gi in range(len(deltas)) for ri in range(repeats)}
        se_results = {gi: f.result() for gi, f in se_futures.items()}
        amp_results = {key: f.result() for key, f in amp_futures.items()}

    rows = []
    n_failures = 0
    base = {
        "model": cfg["model"]["kind"],
        "prior": cfg["prior"]["kind"],
        "denoiser": cfg["denoiser"].get("kind", "bayes"),
        "sigma": _fmt(float(cfg["model"].get("sigma", 0.0))),
        "rho_or_eps": _fmt(_rho_or_eps(cfg)),
        "alpha": _alpha_field(cfg),
    }
    for gi, delta in enumerate(deltas):
        se_corr, se_mse, se_status = se_results[gi]
        for ri in range(repeats):
            run, acc, status = amp_results[(gi, ri)]
            if status != "ok":
                n_failures += 1
            for it in range(iterations + 1):
                for sig in range(n_sig):
                    row = dict(base)
                    row.update({
                        "delta": _fmt(delta),
                        "repeat": str(ri),
                        "iter": str(it),
                        "signal": str(sig + 1),
                    })
                    if run is not None and it < run.corr.shape[0]:
                        cell_status = "ok" if run.corr_ok[it, sig] else "degenerate"
                        row["corr_emp"] = _fmt(run.corr[it, sig])
                        row["mse_emp"] = _fmt(run.mse[it, sig])
                    else:
                        cell_status = status
                        row["corr_emp"] = ""
                        row["mse_emp"] = ""
                    if se_status == "ok":
                        row["corr_se"] = _fmt(se_corr[it, sig])
                        row["mse_se"] = _fmt(se_mse[it, sig])
                    else:
                        row["corr_se"] = ""
                        row["mse_se"] = ""
                        cell_status = cell_status if cell_status != "ok" else se_status
                    row["status"] = cell_status
                    row["label_acc"] = (_fmt(acc) if acc is not None
                                        and it == iterations else "")
                    rows.append(row)
    csv_path = out_dir / "sweep_results.csv"
    _write_csv(csv_path, CSV_COLUMNS, rows)
    manifest_path = _write_manifest(out_dir, "sweep", cfg, master_seed)
    return SweepOutput(csv_path=csv_path, manifest_path=manifest_path,
                       n_failures=n_failures)


def run_heatmap(cfg: dict, out_dir, threads: int = 1):
    """Minimum-signal mean correlation over a (delta, sparsity) grid."""
    cfg = validate_config(cfg)
    if cfg["prior"].get("kind") != "sparse":
        raise ConfigError("heatmaps are defined for the sparse prior")
    if "grid" not in cfg or "eps" not in cfg["grid"]:
        raise ConfigError("heatmap config needs grid.eps")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channel = build_channel(cfg)
    deltas = [float(d) for d in cfg["deltas"]]
    eps_list = [float(e) for e in cfg["grid"]["eps"]]
    repeats = int(cfg.get("repeats", 1))
    iterations = int(cfg.get("iterations", 10))
    master_seed = int(cfg.get("seed", 0))
    cells = list(itertools.product(range(len(deltas)), range(len(eps_list))))

    def cell_task(ci):
        di, ei = cells[ci]
        delta, eps = deltas[di], eps_list[ei]
        if eps == 0.0:
            return None, "degenerate"
        sub = dict(cfg)
        sub["prior"] = {"kind": "sparse", "eps": eps}
        prior = build_prior(sub, channel.n_signals)
        finals = []
        status = "ok"
        for ri in range(repeats):
            try:
                run, _ = _amp_repeat(sub, channel, prior, delta,
                                     task_seed(master_seed, ci, ri))
                finals.append(run.corr[-1])
            except DivergedRunError:
                status = "diverged"
        if not finals:
            return None, status
        mean_corr = np.mean(np.array(finals), axis=0)
        return float(mean_corr.min()), status

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(cell_task, range(len(cells))))

    rows = []
    n_failures = 0
    for ci, (di, ei) in enumerate(cells):
        value, status = results[ci]
        if status not in ("ok", "degenerate"):
            n_failures += 1
        rows.append({
            "model": cfg["model"]["kind"],
            "prior": "sparse",
            "denoiser": cfg["denoiser"].get("kind", "bayes"),
            "delta": _fmt(deltas[di]),
            "sigma": _fmt(float(cfg["model"].get("sigma", 0.0))),
            "rho_or_eps": _fmt(eps_list[ei]),
            "alpha": _alpha_field(cfg),
            "repeats": str(repeats),
            "min_corr_mean": _fmt(value) if value is not None else "",
            "status": status,
        })
    csv_path = out_dir / "heatmap_results.csv"
    _write_csv(csv_path, HEATMAP_COLUMNS, rows)
    manifest_path = _write_manifest(out_dir, "heatmap", cfg, master_seed)
    return SweepOutput(csv_path=csv_path, manifest_path=manifest_path,
                       n_failures=n_failures)


def run_em_experiment(cfg: dict, out_dir, threads: int = 1):
    """Intercept-estimation runs with per-outer-iteration traces.

    The reference predictions in the corr_se/mse_se columns come from the
    oracle-intercept recursion evaluated at the matching cumulative inner
    iteration count.
    """
    cfg = validate_config(cfg)
    if cfg["model"]["kind"] != "mar":
        raise ConfigError("the em-amp experiment requires the max-affine model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channel = build_channel(cfg)
    prior = build_prior(cfg, channel.n_signals)
    deltas = [float(d) for d in cfg["deltas"]]
    repeats = int(cfg.get("repeats", 1))
    em_cfg = cfg.get("em", {})
    m_max = int(em_cfg.get("m_max", 5))
    k_max = int(em_cfg.get("k_max", 5))
    oracle = bool(em_cfg.get("oracle", False))
    warm_start = bool(em_cfg.get("warm_start", True))
    mc = _mc_settings(cfg)
    master_seed = int(cfg.get("seed", 0))
    sigma = float(cfg["model"].get("sigma", 0.0))
    p = int(cfg["p"])

    def se_task(gi):
        try:
            se = run_se(prior, channel, deltas[gi], iterations=m_max * k_max,
                        mc_samples=mc["se_samples"],
                        seed=task_seed(master_seed, gi, 10**6),
                        mc_inner=mc["g_samples"])
            return se.corr, se.mse, "ok"
        except (NumericalFailureError, ValueError):
            zeros = np.zeros((m_max * k_max + 1, channel.n_signals))
            return zeros, zeros, "se-failed"

    def em_task(gi, ri):
        n = int(round(deltas[gi] * p))
        seed = task_seed(master_seed, gi, ri)
        instance = generate_instance(channel, prior, n, p, seed=seed)
        try:
            if oracle:
                run = run_oracle_amp(instance, prior, sigma, m_max=m_max,
                                     k_max=k_max, mc_samples=mc["g_samples"],
                                     seed=seed)
            else:
                run = run_em_amp(instance, prior, sigma, m_max=m_max,
                                 k_max=k_max, mc_samples=mc["g_samples"],
                                 ez_samples=mc["ez_samples"], seed=seed,
                                 warm_start=warm_start,
                                 m_step_iters=int(em_cfg.get("m_step_iters", 6)))
            return run, "ok"
        except DivergedRunError as err:
            return None, f"diverged@{err.iteration}"

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        se_futures = {gi: pool.submit(se_task, gi) for gi in range(len(deltas))}
        em_futures = {(gi, ri): pool.submit(em_task, gi, ri)
                      for gi in range(len(deltas)) for ri in range(repeats)}
        se_results = {gi: f.result() for gi, f in se_futures.items()}
        em_results = {key: f.result() for key, f in em_futures.items()}

    rows, trace_rows = [], []
    n_failures = 0
    for gi, delta in enumerate(deltas):
        se_corr, se_mse, se_status = se_results[gi]
        for ri in range(repeats):
            run, status = em_results[(gi, ri)]
            if status != "ok":
                n_failures += 1
                continue
            for m in range(m_max + 1):
                k_eq = min(m * k_max, se_corr.shape[0] - 1)
                for sig in range(channel.n_signals):
                    rows.append({
                        "model": "mar",
                        "prior": cfg["prior"]["kind"],
                        "denoiser": "oracle" if oracle else "em",
                        "delta": _fmt(delta),
                        "sigma": _fmt(sigma),
                        "rho_or_eps": _fmt(_rho_or_eps(cfg)),
                        "alpha": "",
                        "repeat": str(ri),
                        "iter": str(m),
                        "signal": str(sig + 1),
                        "corr_emp": _fmt(run.corr[m, sig]),
                        "mse_emp": _fmt(run.mse[m, sig]),
                        "corr_se": _fmt(se_corr[k_eq, sig]) if se_status == "ok" else "",
                        "mse_se": _fmt(se_mse[k_eq, sig]) if se_status == "ok" else "",
                        "status": "ok" if se_status == "ok" else se_status,
                        "label_acc": "",
                    })
                trace_rows.append({
                    "delta": _fmt(delta),
                    "repeat": str(ri),
                    "outer_iter": str(m),
                    "b1": _fmt(run.intercept_trace[m, 0]),
                    "b2": _fmt(run.intercept_trace[m, 1]),
                })
    csv_path = out_dir / "em_results.csv"
    _write_csv(csv_path, CSV_COLUMNS, rows)
    trace_path = out_dir / "em_trace.csv"
    _write_csv(trace_path, ["delta", "repeat", "outer_iter", "b1", "b2"], trace_rows)
    manifest_path = _write_manifest(out_dir, "em-amp", cfg, master_seed)
    return SweepOutput(csv_path=csv_path, manifest_path=manifest_path,
                       n_failures=n_failures)


def _write_csv(path: Path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(row.get(c, "") for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_manifest(out_dir: Path, command: str, cfg: dict, master_seed: int) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": master_seed,
        "version": __version__,
        "created_unix": int(time.time()),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def load_config(path) -> tuple[dict, str | None]:
    """Read a config file, accepting either a raw config or a manifest."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if "config" in data and "command" in data:
        return data["config"], data["command"]
    return data, None
