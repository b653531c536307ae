"""One renderer per figure id; figure ids mirror the experiment ids."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = Path(__file__).with_name("default.mplstyle")


class MissingInputError(FileNotFoundError):
    """A required results CSV is absent; carries the missing paths."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing input files: " + ", ".join(self.paths))


def read_table(path):
    with open(path, "r", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MissingInputError([path])
    names = rows[0]
    out = {}
    for j, name in enumerate(names):
        col = [row[j] for row in rows[1:]]
        try:
            out[name] = np.array(col, dtype=float)
        except ValueError:
            out[name] = np.array(col)
    return out


def require(results_dir, *names):
    paths = [Path(results_dir) / name for name in names]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MissingInputError(missing)
    return [read_table(p) for p in paths]


def save(fig, out_path, fmt):
    fig.savefig(out_path, format=fmt, metadata=_clean_metadata(fmt))
    plt.close(fig)


def _clean_metadata(fmt):
    # strip run-dependent fields so identical inputs give identical bytes
    if fmt == "svg":
        return {"Date": None}
    if fmt == "png":
        return {"Software": None}
    return None


def render_ex1_moments(results_dir, out_path, fmt):
    oracle, closure = require(results_dir, "oracle.csv", "closure.csv")
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(oracle["t"], oracle["mean"], "k.-", label="sampled flow")
    axes[0].plot(closure["t"], closure["mean"], "r--", label="closed moments")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("mean error")
    axes[0].legend()
    axes[1].plot(oracle["t"], oracle["var"], "k.-", label="sampled flow")
    axes[1].plot(closure["t"], closure["var"], "r--", label="closed moments")
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("error variance")
    axes[1].legend()
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex2_adaptive_etkf(results_dir, out_path, fmt):
    k10, k20 = require(results_dir, "adaptive_k10.csv", "adaptive_k20.csv")
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for table, color, label in ((k10, "0.6", "10 members"),
                                (k20, "k", "20 members")):
        axes[0, 0].plot(table["m"], table["rmse_state"], color=color,
                        label=label)
        axes[0, 1].plot(table["m"], np.abs(table["r"] - 1.0), color=color,
                        label=label)
        axes[1, 0].plot(table["m"], table["q1"], color=color, label=label)
        axes[1, 1].plot(table["m"], table["q2"], color=color, label=label)
    axes[0, 0].set_ylabel("state RMSE")
    axes[0, 1].set_ylabel("|r - 1|")
    axes[1, 0].set_ylabel("q1")
    axes[1, 1].set_ylabel("q2")
    for ax in axes.flat:
        ax.set_xlabel("cycle")
        ax.legend()
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex3_stoch_param(results_dir, out_path, fmt):
    sweep, pdf_full, pdf_on, pdf_off, acf_full, acf_on, acf_off = require(
        results_dir, "rmse_vs_dtobs.csv", "pdf_full.csv", "pdf_online.csv",
        "pdf_offline.csv", "acf_full.csv", "acf_online.csv",
        "acf_offline.csv")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(sweep["dt_obs"], sweep["rmse_online"], "o-", label="online")
    axes[0].plot(sweep["dt_obs"], sweep["rmse_offline"], "s--",
                 label="offline")
    axes[0].set_xlabel("observation interval")
    axes[0].set_ylabel("filter RMSE")
    axes[0].legend()
    axes[1].plot(pdf_full["x"], pdf_full["pdf"], "k-", label="full model")
    axes[1].plot(pdf_on["x"], pdf_on["pdf"], "b--", label="online")
    axes[1].plot(pdf_off["x"], pdf_off["pdf"], "r:", label="offline")
    axes[1].set_xlabel("x")
    axes[1].set_ylabel("equilibrium density")
    axes[1].legend()
    axes[2].plot(acf_full["lag"], acf_full["acf"], "k-", label="full model")
    axes[2].plot(acf_on["lag"], acf_on["acf"], "b--", label="online")
    axes[2].plot(acf_off["lag"], acf_off["acf"], "r:", label="offline")
    axes[2].set_xlabel("lag (time units)")
    axes[2].set_ylabel("autocorrelation")
    axes[2].legend()
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex4_twoscale(results_dir, out_path, fmt):
    (table,) = require(results_dir, "twoscale.csv")
    variants = ("true", "rsf", "rsfa", "opt")
    styles = {"true": "ko-", "rsf": "rs--", "rsfa": "b^:", "opt": "gd-."}
    fig, axes = plt.subplots(1, 2, figsize=(8.5, 3.2))
    for variant in variants:
        sel = table["variant"] == variant
        eps = table["eps"][sel]
        order = np.argsort(eps)
        axes[0].plot(eps[order], table["mse"][sel][order], styles[variant],
                     label=variant)
        axes[1].plot(eps[order], table["p_post"][sel][order], styles[variant],
                     label=variant)
    axes[0].set_xlabel("scale gap")
    axes[0].set_ylabel("mean square error")
    axes[1].set_xlabel("scale gap")
    axes[1].set_ylabel("stationary posterior variance")
    for ax in axes:
        ax.set_xscale("log")
        ax.legend()
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex5_spekf(results_dir, out_path, fmt):
    trace, summary = require(results_dir, "trace.csv", "summary.csv")
    variants = ("spekf", "rspekf", "rsfa", "rsf")
    colors = {"spekf": "0.5", "rspekf": "g", "rsfa": "b", "rsf": "r"}
    window = slice(0, min(200, trace["m"].size))
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    axes[0].plot(trace["m"][window], trace["re_truth"][window], "k--",
                 label="truth")
    for v in variants:
        rmse = summary[f"rmse_{v}"][0]
        axes[0].plot(trace["m"][window], trace[f"re_mean_{v}"][window],
                     color=colors[v], label=f"{v} (rmse {rmse:.3f})")
        axes[1].plot(trace["m"][window], trace[f"pvar_{v}"][window],
                     color=colors[v], label=v)
    axes[0].set_ylabel("posterior mean (real part)")
    axes[0].legend(ncol=3)
    axes[1].set_ylabel("posterior variance")
    axes[1].set_xlabel("cycle")
    axes[1].legend(ncol=4)
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex6_diffusion(results_dir, out_path, fmt):
    tags = ("t0", "t0p5", "t2")
    names = [f"snapshot_{t}.csv" for t in tags] + \
        [f"ensemble_{t}.csv" for t in tags]
    tables = require(results_dir, *names)
    snaps, ensembles = tables[:3], tables[3:]
    fig, axes = plt.subplots(3, 2, figsize=(7, 9))
    labels = ("t = 0", "t = 0.5", "t = 2")
    for row, (snap, ens, label) in enumerate(zip(snaps, ensembles, labels)):
        sc = axes[row, 0].scatter(snap["xpy"], snap["z"], c=snap["p"], s=3,
                                  cmap="jet", rasterized=True)
        axes[row, 0].set_title(f"nonparametric density, {label}")
        fig.colorbar(sc, ax=axes[row, 0])
        axes[row, 1].hist2d(ens["xpy"], ens["z"], bins=40, cmap="jet")
        axes[row, 1].set_title(f"ensemble forecast, {label}")
        for col in (0, 1):
            axes[row, col].set_xlabel("x + y")
            axes[row, col].set_ylabel("z")
    fig.tight_layout()
    save(fig, out_path, fmt)


def render_ex7_semiparam(results_dir, out_path, fmt):
    (table,) = require(results_dir, "forecast_rmse.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table["lead"], table["rmse_perfect"], "k-", label="perfect model")
    ax.plot(table["lead"], table["rmse_semiparam"], "b--",
            label="semiparametric")
    ax.plot(table["lead"], table["rmse_l96"], "r:", label="ring only")
    ax.plot(table["lead"], table["clim_err"], "0.6", linestyle="-.",
            label="climatological error")
    ax.set_xlabel("lead time (model units)")
    ax.set_ylabel("forecast RMSE")
    ax.legend()
    fig.tight_layout()
    save(fig, out_path, fmt)


RENDERERS = {
    "ex1_moments": render_ex1_moments,
    "ex2_adaptive_etkf": render_ex2_adaptive_etkf,
    "ex3_stoch_param": render_ex3_stoch_param,
    "ex4_twoscale": render_ex4_twoscale,
    "ex5_spekf": render_ex5_spekf,
    "ex6_diffusion": render_ex6_diffusion,
    "ex7_semiparam": render_ex7_semiparam,
}


def render(results_dir, figure_id, out_dir=None, fmt="png"):
    """Render one figure id from its results directory; returns the path."""
    if figure_id not in RENDERERS:
        raise KeyError(f"unknown figure id {figure_id!r}")
    if fmt not in ("png", "svg"):
        raise ValueError("format must be png or svg")
    results_dir = Path(results_dir)
    exp_dir = results_dir / figure_id
    if exp_dir.is_dir():
        results_dir = exp_dir
    out_dir = Path(out_dir) if out_dir else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{figure_id}.{fmt}"
    with plt.style.context(str(STYLE)):
        RENDERERS[figure_id](results_dir, out_path, fmt)
    return out_path
