"""Contact sheets of (blurred, restored, sharp) triptychs for evaluation runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def contact_sheet(triptychs, path, rows=None, max_rows: int = 8, title: str | None = None) -> Path:
    """Render up to ``max_rows`` triptychs into one PNG.

    ``rows`` optionally supplies per-image EvalRow records; their PSNR and
    decode flag are printed under the restored column.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    triptychs = list(triptychs)[:max_rows]
    if not triptychs:
        raise ValueError("no images to plot")
    n = len(triptychs)
    fig, axes = plt.subplots(n, 3, figsize=(6.0, 2.1 * n), squeeze=False)
    for r, images in enumerate(triptychs):
        for c, (img, label) in enumerate(zip(images, ("blurred", "restored", "sharp"))):
            ax = axes[r, c]
            gray = np.asarray(img, dtype=np.float64)
            if gray.ndim == 3:
                gray = gray.mean(axis=2)
            ax.imshow(gray, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(label, fontsize=9)
            if c == 1 and rows is not None and r < len(rows):
                row = rows[r]
                ax.set_xlabel(f"{row.psnr:.2f} dB  {'decoded' if row.decoded else 'failed'}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
