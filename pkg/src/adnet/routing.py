"""Blur-severity routing between the lightweight and the strong restoration network.

Sharpness is the variance of the Laplacian of the grayscale input. Inputs
sharper than the calibrated threshold go to LENet; if LENet's output does not
decode, the original input is re-run through EG-Restormer.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from adnet.codec import DecodeResult, Decoder
from adnet.errors import CalibrationError, ContractError, DimensionError

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)

LENET_TAG = "LE"
EG_TAG = "EG"


class Branch(str, enum.Enum):
    MILD = "mild"
    SEVERE = "severe"

    @property
    def network(self) -> str:
        return "LENet" if self is Branch.MILD else "EG-Restormer"


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def laplacian_variance(image: np.ndarray) -> float:
    """Population variance of the 3x3 Laplacian response over the unpadded interior."""
    gray = grayscale(image)
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise DimensionError(f"Laplacian variance needs at least a 3x3 image, got {gray.shape}")
    # correlate == convolve here: the kernel is symmetric
    resp = ndimage.correlate(gray, LAPLACIAN, mode="constant")[1:-1, 1:-1]
    return float(resp.var())


@dataclass(frozen=True)
class CalibrationRecord:
    image_id: str
    lv_score: float
    decodable: bool

    def __post_init__(self):
        if not self.lv_score >= 0:
            raise ContractError(f"LV score must be non-negative, got {self.lv_score}")


@dataclass(frozen=True)
class Calibration:
    tau: float
    separable: bool
    min_decodable: float
    max_non_decodable: float
    n_decodable: int
    n_non_decodable: int


def calibrate_threshold(records: Sequence[CalibrationRecord]) -> Calibration:
    """Threshold halfway between the blurriest decodable and sharpest non-decodable LV."""
    dec = [r.lv_score for r in records if r.decodable]
    non = [r.lv_score for r in records if not r.decodable]
    if not dec or not non:
        empty = "decodable" if not dec else "non-decodable"
        raise CalibrationError(f"the {empty} class is empty; enlarge the calibration set so both "
                               "decodable and non-decodable LENet outputs occur")
    lo, hi = min(dec), max(non)
    tau = (lo + hi) / 2.0
    separable = lo > hi
    if not separable:
        log.warning("calibration classes overlap: min decodable LV %.6g <= max non-decodable LV %.6g", lo, hi)
    return Calibration(tau=tau, separable=separable, min_decodable=lo, max_non_decodable=hi,
                       n_decodable=len(dec), n_non_decodable=len(non))


def collect_calibration_records(manifest, lenet: Callable, decoder: Decoder) -> list:
    """Score every blurred image and record whether LENet's restoration decodes correctly."""
    from adnet.synth import load_image

    records = []
    for entry in manifest.entries:
        blurred = load_image(manifest.path(entry.blur))
        ok = decoder.decode(lenet(blurred)).matches(entry.payload)
        records.append(CalibrationRecord(image_id=entry.blur, lv_score=laplacian_variance(blurred), decodable=ok))
    return records


def write_calibration_report(records: Sequence[CalibrationRecord], calibration: Calibration | None, path) -> Path:
    report = {"records": [asdict(r) for r in records],
              "calibration": asdict(calibration) if calibration is not None else None}
    path = Path(path)
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def save_tau(tau: float, path, **meta) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dict(meta, tau=tau), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_tau(path) -> float:
    return float(json.loads(Path(path).read_text(encoding="utf-8"))["tau"])


@dataclass
class RoutingDecision:
    branch: Branch
    v: float
    tau: float
    trace: list = field(default_factory=list)


def route(v: float, tau: float) -> RoutingDecision:
    """Mild (LENet) iff ``v > tau``; the boundary goes to the strong network."""
    if not (math.isfinite(v) and math.isfinite(tau)):
        raise ContractError(f"routing needs finite scores, got v={v}, tau={tau}")
    return RoutingDecision(branch=Branch.MILD if v > tau else Branch.SEVERE, v=float(v), tau=float(tau))


@dataclass
class RestoreOutcome:
    image: np.ndarray
    decision: RoutingDecision
    decode: DecodeResult

    @property
    def trace(self) -> list:
        return self.decision.trace


def adnet_restore(image: np.ndarray, lenet: Callable, eg_restormer: Callable, tau: float,
                  decoder: Decoder) -> RestoreOutcome:
    decision = route(laplacian_variance(image), tau)
    if decision.branch is Branch.MILD:
        restored = lenet(image)
        decision.trace.append(LENET_TAG)
        result = decoder.decode(restored)
        if result.ok:
            return RestoreOutcome(restored, decision, result)
    restored = eg_restormer(image)
    decision.trace.append(EG_TAG)
    return RestoreOutcome(restored, decision, decoder.decode(restored))


class ADNetPipeline:
    """Callable wrapper so the routed system can be evaluated like a single model."""

    uses_decoder = True

    def __init__(self, lenet: Callable, eg_restormer: Callable, tau: float, decoder: Decoder | None = None):
        self.lenet = lenet
        self.eg_restormer = eg_restormer
        self.tau = tau
        self.decoder = decoder

    def __call__(self, image, decoder: Decoder | None = None) -> RestoreOutcome:
        return adnet_restore(image, self.lenet, self.eg_restormer, self.tau, decoder or self.decoder)


class RandomRoutingPipeline:
    """Baseline that picks a network by coin flip and never re-routes."""

    uses_decoder = True

    def __init__(self, lenet: Callable, eg_restormer: Callable, p_mild: float = 0.5, seed: int = 0,
                 decoder: Decoder | None = None):
        self.lenet = lenet
        self.eg_restormer = eg_restormer
        self.p_mild = p_mild
        self.rng = np.random.default_rng(seed)
        self.decoder = decoder

    def __call__(self, image, decoder: Decoder | None = None) -> RestoreOutcome:
        decoder = decoder or self.decoder
        mild = self.rng.uniform() < self.p_mild
        decision = RoutingDecision(branch=Branch.MILD if mild else Branch.SEVERE, v=laplacian_variance(image),
                                   tau=float("nan"))
        net = self.lenet if mild else self.eg_restormer
        restored = net(image)
        decision.trace.append(LENET_TAG if mild else EG_TAG)
        return RestoreOutcome(restored, decision, decoder.decode(restored))
