"""SVG figures for study reports.

All figures are rendered off-screen and returned as SVG text. A fixed hash
salt and a blank date keep the output byte-stable for a given input.
"""

from __future__ import annotations

import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "stvae", "svg.fonttype": "none", "font.size": 8, "axes.titlesize": 9}


def _to_svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def boxplot_grid(data: dict, rows: list, cols: list, methods: list[str], ylabel: str = "",
                 row_title: str = "{}", col_title: str = "{}") -> str:
    """One boxplot panel per (row, col); ``data[(row, col)][method]`` holds the values."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(rows), len(cols), figsize=(3.2 * len(cols), 2.4 * len(rows)), squeeze=False)
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                ax = axes[i][j]
                cell = data.get((r, c), {})
                vals = [np.asarray(cell.get(m, []), dtype=float) for m in methods]
                vals = [v[np.isfinite(v)] for v in vals]
                pos = [k + 1 for k, v in enumerate(vals) if v.size]
                if pos:
                    ax.boxplot([vals[k - 1] for k in pos], positions=pos, widths=0.6, showfliers=False)
                ax.set_xticks(range(1, len(methods) + 1))
                ax.set_xticklabels(methods, rotation=45, ha="right")
                ax.set_xlim(0.4, len(methods) + 0.6)
                if i == 0:
                    ax.set_title(col_title.format(c))
                if j == 0:
                    ax.set_ylabel(f"{row_title.format(r)}\n{ylabel}")
        fig.tight_layout()
        return _to_svg(fig)


def _heat(ax, mat, vmin, vmax, cmap, row_labels=None, col_labels=None, annotate=False):
    im = ax.imshow(np.ma.masked_invalid(mat), vmin=vmin, vmax=vmax, cmap=cmap, interpolation="nearest")
    if row_labels is not None:
        ax.set_yticks(range(len(row_labels)))
        ax.set_yticklabels(row_labels)
    if col_labels is not None:
        ax.set_xticks(range(len(col_labels)))
        ax.set_xticklabels(col_labels)
    if annotate:
        for (a, b), v in np.ndenumerate(mat):
            ax.text(b, a, "" if not math.isfinite(v) else f"{v:.2f}", ha="center", va="center", fontsize=6)
    return im


def heatmap_row(mats: dict[str, np.ndarray], row_labels=None, col_labels=None, title: str = "") -> str:
    """Side-by-side annotated heatmaps on a shared colour scale (NaN cells left blank)."""
    finite = np.concatenate([m[np.isfinite(m)].ravel() for m in mats.values()] + [np.zeros(0)])
    vmin, vmax = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(mats), figsize=(2.8 * len(mats), 2.6), squeeze=False)
        for ax, (name, mat) in zip(axes[0], mats.items()):
            im = _heat(ax, mat, vmin, vmax, "viridis", row_labels, col_labels, annotate=True)
            ax.set_title(name)
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8)
        if title:
            fig.suptitle(title)
        return _to_svg(fig)


def heatmap_pair(left: np.ndarray, right: np.ndarray, titles=("raw", "decoded")) -> str:
    """Two correlation matrices on the [-1, 1] scale."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.0))
        for ax, mat, t in zip(axes, (left, right), titles):
            im = _heat(ax, mat, -1.0, 1.0, "RdBu_r")
            ax.set_title(t)
        fig.colorbar(im, ax=list(axes), shrink=0.8)
        return _to_svg(fig)


def latent_scatter(codes: np.ndarray, labels=None, dims=(0, 1)) -> str:
    """Scatter of two latent dimensions, coloured by class label when given."""
    codes = np.asarray(codes, dtype=float)
    a, b = dims
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        if labels is None:
            ax.scatter(codes[:, a], codes[:, b], s=4)
        else:
            labels = np.asarray(labels)
            for lab in sorted(set(labels.tolist())):
                sel = labels == lab
                ax.scatter(codes[sel, a], codes[sel, b], s=4, label=str(lab))
            ax.legend(frameon=False)
        ax.set_xlabel(f"z{a + 1}")
        ax.set_ylabel(f"z{b + 1}")
        fig.tight_layout()
        return _to_svg(fig)
