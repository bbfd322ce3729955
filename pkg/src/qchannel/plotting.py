"""PNG figures rendered from the CSV files a command wrote.

Figures are a convenience next to the CSVs; they are read back from disk so
a plot always shows exactly what the data files contain.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path) -> np.ndarray:
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")


def _measured(data) -> np.ndarray:
    tot = data["n_corr"] + data["n_anti"]
    return np.where(tot > 0, data["n_corr"] / np.maximum(tot, 1), data["p_correlated"])


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def _scan_figure(csvs: list, out: Path, name: str, title: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for p in csvs:
        d = _read(p)
        y = _measured(d) if np.issubdtype(d["n_corr"].dtype, np.number) else d["p_correlated"]
        ax.plot(d["offset_um"], y, lw=0.8, label=Path(p).stem)
    ax.set_xlabel("stage offset (um)")
    ax.set_ylabel("correlated fraction")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, out / name)


def _fig3(csvs: list, out: Path) -> str:
    fig, axes = plt.subplots(len(csvs), 1, figsize=(7, 2.2 * len(csvs)), sharex=True, squeeze=False)
    for ax, p in zip(axes[:, 0], csvs):
        d = _read(p)
        ax.plot(d["time_s"], _measured(d), lw=0.7)
        ax.set_ylim(-0.05, 1.05)
        ax.set_ylabel("bit parity")
        ax.set_title(Path(p).stem.replace("fig3_", ""), fontsize=9)
    axes[-1, 0].set_xlabel("time (s)")
    return _save(fig, out / "fig3.png")


def _qkd_series(path: str, out: Path) -> str:
    d = _read(path)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(d["time_s"], d["qber"], "o-", ms=3, label="measured")
    ax.plot(d["time_s"], d["predicted_qber"], lw=1, label="predicted")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("45-degree QBER")
    ax.legend(fontsize=8)
    return _save(fig, out / "qkd_drift_series.png")


def render(report, out_dir) -> list:
    """Render every figure that applies to ``report``; returns the PNG paths."""
    out = Path(out_dir)
    csvs = [p for p in report.outputs if p.endswith(".csv") and not p.endswith("_summary.csv")]
    pngs = []
    if report.command == "scan_psi":
        pngs.append(_scan_figure([p for p in csvs if "scan_psi" in p], out, "scan_psi.png", "Psi dip scans"))
    elif report.command == "scan_phi":
        pngs.append(_scan_figure([p for p in csvs if p.endswith("scan_phi.csv")], out, "scan_phi.png",
                                 "Phi fringe checkpoints"))
    elif report.command == "fig3":
        pngs.append(_fig3([p for p in csvs if "history" not in p], out))
    elif report.command == "qkd":
        series = [p for p in csvs if p.endswith("qkd_drift_series.csv")]
        if series:
            pngs.append(_qkd_series(series[0], out))
    return pngs
