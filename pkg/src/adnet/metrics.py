"""Image-quality and task metrics, plus manifest-level evaluation reports."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adnet.codec import DecodeResult, DecodeStatus, Decoder
from adnet.errors import ContractError, DimensionError, ManifestError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for unit-range images; identical inputs report the 100 dB cap."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    k = win.shape[0]

    def filt(z):
        return np.einsum("ijkl,kl->ij", sliding_window_view(z, (k, k)), win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), valid windows only.

    Multi-channel inputs are scored per channel and averaged.
    """
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise DimensionError(f"expected H x W or H x W x C images, got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"images of {a.shape[:2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    if a.ndim == 2:
        return _ssim_channel(a, b, win)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win) for c in range(a.shape[2])]))


def decoding_rate(images: Sequence[np.ndarray], decoder: Decoder, expected: Sequence[str] | None = None) -> float:
    """Percentage of images that decode (to the expected payload, when given)."""
    if len(images) == 0:
        raise ContractError("decoding rate of an empty image set is undefined")
    if expected is not None and len(expected) != len(images):
        raise DimensionError(f"{len(images)} images but {len(expected)} expected payloads")
    hits = 0
    for i, img in enumerate(images):
        res = decoder.decode(img)
        hits += res.matches(expected[i] if expected is not None else None)
    return 100.0 * hits / len(images)


@dataclass
class EvalRow:
    index: int
    psnr: float
    ssim: float
    status: str
    decoded: bool
    wall_time: float
    restore_time: float
    decode_time: float
    trace: list = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list
    model: str
    backend: dict
    config_hash: str
    workers: int = 1

    @property
    def aggregates(self) -> dict:
        n = len(self.rows)
        if n == 0:
            return {"count": 0}
        return {
            "count": n,
            "mean_psnr": float(np.mean([r.psnr for r in self.rows])),
            "mean_ssim": float(np.mean([r.ssim for r in self.rows])),
            "dr_percent": 100.0 * sum(r.decoded for r in self.rows) / n,
            "avg_time_s": float(np.mean([r.wall_time for r in self.rows])),
            "avg_restore_time_s": float(np.mean([r.restore_time for r in self.rows])),
            "avg_decode_time_s": float(np.mean([r.decode_time for r in self.rows])),
            "backend_errors": sum(r.status == DecodeStatus.BACKEND_ERROR.value for r in self.rows),
        }

    def to_dict(self) -> dict:
        return {"model": self.model, "backend": self.backend, "config_hash": self.config_hash,
                "workers": self.workers, "rows": [asdict(r) for r in self.rows], "aggregates": self.aggregates}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class TimedDecoder(Decoder):
    """Wraps a decoder and accumulates the time spent inside it."""

    def __init__(self, inner: Decoder):
        self.inner = inner
        self.name = inner.name
        self.elapsed = 0.0

    def decode(self, image):
        start = time.perf_counter()
        try:
            return self.inner.decode(image)
        finally:
            self.elapsed += time.perf_counter() - start


def evaluate(restorer: Callable, manifest, decoder: Decoder, name: str = "model", backend: dict | None = None,
             keep_outputs: bool = False):
    """Restore every blurred image of ``manifest`` and score it against the sharp one.

    ``restorer`` maps an image to either a restored image, or to an object with
    ``image``, ``decode`` and ``trace`` attributes when it decodes internally
    (the routed pipeline). Wall time covers restoration plus decoding, not I/O.
    Returns the report, and the restored images too when ``keep_outputs``.
    """
    from adnet.synth import load_image

    missing = [manifest.path(p) for e in manifest.entries for p in (e.sharp, e.blur)
               if not manifest.path(p).is_file()]
    if missing:
        raise ManifestError("evaluation inputs missing", missing)
    timed = TimedDecoder(decoder)
    rows, outputs = [], []
    for i, entry in enumerate(manifest.entries):
        sharp = load_image(manifest.path(entry.sharp))
        blurred = load_image(manifest.path(entry.blur))
        timed.elapsed = 0.0
        start = time.perf_counter()
        out = _call_with_decoder(restorer, blurred, timed)
        if hasattr(out, "decode") and hasattr(out, "image"):
            result: DecodeResult = out.decode
            restored, trace = out.image, list(out.trace)
        else:
            restored, trace = out, []
            result = timed.decode(restored)
        wall = time.perf_counter() - start
        restored = np.clip(np.asarray(restored, dtype=np.float64), 0.0, 1.0)
        rows.append(EvalRow(index=i, psnr=psnr(restored, sharp), ssim=ssim(restored, sharp),
                            status=result.status.value, decoded=result.matches(entry.payload),
                            wall_time=wall, restore_time=wall - timed.elapsed, decode_time=timed.elapsed,
                            trace=trace))
        if keep_outputs:
            outputs.append((blurred, restored, sharp))
    report = EvalReport(rows=rows, model=name, backend=backend or {"decoder": decoder.name},
                        config_hash=config_hash({"model": name, "manifest": str(manifest.root),
                                                 "count": len(manifest)}))
    return (report, outputs) if keep_outputs else report


def _call_with_decoder(restorer, image, decoder):
    if getattr(restorer, "uses_decoder", False):
        return restorer(image, decoder=decoder)
    return restorer(image)
