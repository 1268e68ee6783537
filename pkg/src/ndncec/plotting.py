"""Figures for the report and calibrate commands.

CSV files stay the source of truth; these PNGs are a convenience view.
matplotlib is imported lazily and always with the Agg backend.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, List, Sequence


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> None:
    # no timestamp/software metadata, so reruns write the same bytes
    fig.savefig(path, dpi=110, metadata={"Software": None})
    fig.clf()
    _plt().close(fig)


def _series(rows: Sequence[dict]) -> Dict[str, List[dict]]:
    out = defaultdict(list)
    for r in rows:
        out[f"{r['technique']} m={r['m']}"].append(r)
    return dict(sorted(out.items()))


def error_vs_t(rows: Sequence[dict], path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for label, rs in _series(rows).items():
        best = {}
        for r in rs:
            t = int(r["t_send_ns"])
            e = float(r["error_rate"])
            best[t] = min(e, best.get(t, 1.0))
        ts = sorted(best)
        ax.plot([t / 1e6 for t in ts], [100 * best[t] for t in ts], marker="o", label=label)
    ax.set_xlabel("interest spacing t (ms)")
    ax.set_ylabel("error (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def error_vs_threshold(rows: Sequence[dict], path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for label, rs in _series(rows).items():
        by_t = defaultdict(list)
        for r in rs:
            if r["t_thresh_ns"] != "":
                by_t[int(r["t_send_ns"])].append((int(r["t_thresh_ns"]), float(r["error_rate"])))
        for t, pts in sorted(by_t.items()):
            pts.sort()
            ax.plot([p[0] / 1e6 for p in pts], [100 * p[1] for p in pts], marker=".",
                    label=f"{label}, t={t / 1e6:g} ms")
    ax.set_xlabel("t_thresh (ms)")
    ax.set_ylabel("error (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def bitrate_vs_error(table: Sequence[dict], path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for label, rs in _series(table).items():
        rs = sorted(rs, key=lambda r: float(r["bitrate"]))
        ax.plot([float(r["bitrate"]) for r in rs], [100 * float(r["error_rate"]) for r in rs],
                marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("bit rate (bits per simulated second)")
    ax.set_ylabel("error (%)")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def rtt_histogram(hits: Sequence[int], misses: Sequence[int], threshold: int, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    lo = min(min(hits), min(misses)) / 1e6
    hi = max(max(hits), max(misses)) / 1e6
    bins = 80
    ax.hist([h / 1e6 for h in hits], bins=bins, range=(lo, hi), alpha=0.6, label="hit")
    ax.hist([m / 1e6 for m in misses], bins=bins, range=(lo, hi), alpha=0.6, label="miss")
    ax.axvline(threshold / 1e6, color="k", ls="--", lw=1, label="t_thresh")
    ax.set_xlabel("RTT (ms)")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def rtt_by_index(rtt_rows: Sequence[dict], path, trial: int = 0) -> None:
    """RTT against request index for one trial, split by the true symbol."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    pts = [r for r in rtt_rows if int(r["trial"]) == trial and r["rtt"] != ""]
    for truth in sorted({str(r["truth"]) for r in pts}):
        sel = [r for r in pts if str(r["truth"]) == truth]
        ax.scatter([int(r["index"]) for r in sel], [int(r["rtt"]) / 1e6 for r in sel], s=3,
                   label=f"symbol {truth}")
    ax.set_xlabel("request index")
    ax.set_ylabel("RTT (ms)")
    ax.legend(fontsize=8, markerscale=3)
    fig.tight_layout()
    _save(fig, path)
