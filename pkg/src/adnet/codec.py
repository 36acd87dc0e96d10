"""QR encode/decode behind one swappable interface.

Decoding goes through a backend: either an external executable invoked with an
image path (the default runs the bundled zxing wrapper as
``python -m adnet.zxing_decode {path}``; ``zbarimg --quiet --raw {path}`` works
unchanged), or an embedded library call for high-throughput evaluation.
Encoding uses ``segno``.
"""

from __future__ import annotations

import enum
import os
import shlex
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from adnet.errors import BackendUnavailableError, CapacityError, ParameterError

PLACEHOLDER = "{path}"
EMBEDDED_PREFIX = "embedded:"
DEFAULT_DECODER = f"{shlex.quote(sys.executable)} -m adnet.zxing_decode {PLACEHOLDER}"
EC_LEVELS = ("L", "M", "Q", "H")


class DecodeStatus(str, enum.Enum):
    DECODED = "decoded"
    NOT_DECODED = "not_decoded"
    BACKEND_ERROR = "backend_error"


@dataclass(frozen=True)
class DecodeResult:
    status: DecodeStatus
    payload: str | None = None
    latency: float = 0.0
    detail: str = ""

    def __post_init__(self):
        if (self.payload is not None) != (self.status is DecodeStatus.DECODED):
            raise ParameterError("payload must be present exactly when status is DECODED")

    @property
    def ok(self) -> bool:
        return self.status is DecodeStatus.DECODED

    def matches(self, expected: str | None) -> bool:
        return self.ok and (expected is None or self.payload == expected)


@dataclass
class CodecBackendConfig:
    """``decoder`` is a command template with one ``{path}`` placeholder, or ``embedded:<name>``."""

    decoder: str = DEFAULT_DECODER
    timeout: float = 10.0
    embedded_encoder: bool = True

    def __post_init__(self):
        if self.timeout <= 0:
            raise ParameterError(f"decoder timeout must be positive, got {self.timeout}")
        if not self.decoder.startswith(EMBEDDED_PREFIX) and self.decoder.count(PLACEHOLDER) != 1:
            raise ParameterError(f"decoder template must contain exactly one {PLACEHOLDER} placeholder: "
                                 f"{self.decoder!r}")

    @classmethod
    def from_env(cls, **overrides) -> "CodecBackendConfig":
        kwargs = {}
        if os.environ.get("ADNET_DECODER"):
            kwargs["decoder"] = os.environ["ADNET_DECODER"]
        if os.environ.get("ADNET_DECODER_TIMEOUT"):
            kwargs["timeout"] = float(os.environ["ADNET_DECODER_TIMEOUT"])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize an image in [0, 1] to 8-bit grayscale exactly as it is stored on disk."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2) if arr.shape[2] != 1 else arr[..., 0]
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="L").save(path, format="PNG")


class Decoder:
    name = "decoder"

    def decode(self, image: np.ndarray) -> DecodeResult:
        raise NotImplementedError

    def probe(self) -> None:
        """Verify the decoder against a freshly rendered fixture; raise if it fails."""
        from adnet.synth import render_qr

        fixture = render_qr("ADNET-PROBE", version=1, ec_level="M", module_pixels=4, quiet_zone=4)
        result = self.decode(fixture)
        if not result.matches("ADNET-PROBE"):
            raise BackendUnavailableError(f"decoder {self.name!r} failed its startup probe "
                                          f"({result.status.value}: {result.detail or result.payload})")


class CommandDecoder(Decoder):
    """Runs an external executable; stdout's first line is the payload on success."""

    def __init__(self, template: str, timeout: float = 10.0):
        self.template = template
        self.timeout = timeout
        self.argv = shlex.split(template)
        self.name = self.argv[0] if self.argv else template
        if not self.argv or shutil.which(self.argv[0]) is None:
            raise BackendUnavailableError(f"decoder executable not found: {self.name}")

    def decode(self, image: np.ndarray) -> DecodeResult:
        fd, tmp = tempfile.mkstemp(prefix="adnet-", suffix=".png")
        os.close(fd)
        start = time.perf_counter()
        try:
            write_png(image, tmp)
            argv = [a.replace(PLACEHOLDER, tmp) for a in self.argv]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired:
                return DecodeResult(DecodeStatus.BACKEND_ERROR, latency=time.perf_counter() - start,
                                    detail=f"timed out after {self.timeout}s")
            except OSError as exc:
                return DecodeResult(DecodeStatus.BACKEND_ERROR, latency=time.perf_counter() - start,
                                    detail=str(exc))
            latency = time.perf_counter() - start
            lines = proc.stdout.splitlines()
            if proc.returncode != 0 or not lines or not lines[0]:
                return DecodeResult(DecodeStatus.NOT_DECODED, latency=latency,
                                    detail=f"exit {proc.returncode}")
            return DecodeResult(DecodeStatus.DECODED, payload=lines[0], latency=latency)
        finally:
            Path(tmp).unlink(missing_ok=True)


class ZXingDecoder(Decoder):
    """In-process zxing-cpp; input is quantized to 8 bits just like the PNG route."""

    name = "embedded:zxing"

    def __init__(self):
        try:
            import zxingcpp
        except ImportError as exc:
            raise BackendUnavailableError("embedded zxing backend needs the 'zxing-cpp' package") from exc
        self._zx = zxingcpp

    def decode(self, image: np.ndarray) -> DecodeResult:
        start = time.perf_counter()
        try:
            found = self._zx.read_barcodes(to_uint8(image), formats=self._zx.BarcodeFormat.QRCode)
        except Exception as exc:  # native library failure
            return DecodeResult(DecodeStatus.BACKEND_ERROR, latency=time.perf_counter() - start, detail=str(exc))
        latency = time.perf_counter() - start
        texts = [b.text for b in found if b.valid and b.text]
        if not texts:
            return DecodeResult(DecodeStatus.NOT_DECODED, latency=latency)
        return DecodeResult(DecodeStatus.DECODED, payload=texts[0], latency=latency)


class OpenCVDecoder(Decoder):
    name = "embedded:opencv"

    def __init__(self):
        try:
            import cv2
        except ImportError as exc:
            raise BackendUnavailableError("embedded opencv backend needs opencv-python") from exc
        self._detector = cv2.QRCodeDetector()

    def decode(self, image: np.ndarray) -> DecodeResult:
        start = time.perf_counter()
        try:
            text, _, _ = self._detector.detectAndDecode(to_uint8(image))
        except Exception as exc:
            return DecodeResult(DecodeStatus.BACKEND_ERROR, latency=time.perf_counter() - start, detail=str(exc))
        latency = time.perf_counter() - start
        if not text:
            return DecodeResult(DecodeStatus.NOT_DECODED, latency=latency)
        return DecodeResult(DecodeStatus.DECODED, payload=text, latency=latency)


_EMBEDDED = {"zxing": ZXingDecoder, "opencv": OpenCVDecoder}


def make_decoder(config: CodecBackendConfig | None = None, probe: bool = True) -> Decoder:
    config = config or CodecBackendConfig()
    if config.decoder.startswith(EMBEDDED_PREFIX):
        key = config.decoder[len(EMBEDDED_PREFIX):]
        if key not in _EMBEDDED:
            raise ParameterError(f"unknown embedded decoder {key!r}; choose from {sorted(_EMBEDDED)}")
        decoder = _EMBEDDED[key]()
    else:
        decoder = CommandDecoder(config.decoder, config.timeout)
    if probe:
        decoder.probe()
    return decoder


def decode(image: np.ndarray, decoder: Decoder) -> DecodeResult:
    return decoder.decode(image)


# -- encoding ------------------------------------------------------------------

def _segno():
    try:
        import segno
    except ImportError as exc:
        raise BackendUnavailableError("QR encoding needs the 'segno' package") from exc
    return segno


def capacity_bytes(version: int, ec_level: str) -> int:
    """Largest byte-mode payload that fits ``version`` at ``ec_level`` (found by bisection)."""
    segno = _segno()
    lo, hi = 0, 3000
    while lo < hi:
        mid = (lo + hi + 1) // 2
        try:
            segno.make_qr("a" * mid, version=version, error=ec_level, boost_error=False)
            lo = mid
        except segno.DataOverflowError:
            hi = mid - 1
    return lo


def encode(payload: str, version: int | None = 1, ec_level: str = "M") -> np.ndarray:
    """Module matrix (True = dark) of a QR symbol, without quiet zone."""
    segno = _segno()
    ec_level = ec_level.upper()
    if ec_level not in EC_LEVELS:
        raise ParameterError(f"error correction level must be one of {EC_LEVELS}, got {ec_level!r}")
    try:
        qr = segno.make_qr(payload, version=version, error=ec_level, boost_error=False, mask=None)
    except segno.DataOverflowError as exc:
        limit = capacity_bytes(version, ec_level) if version else None
        raise CapacityError(f"payload of {len(payload.encode('utf-8'))} bytes exceeds version {version}-"
                            f"{ec_level} capacity (byte-mode limit {limit})", limit=limit) from exc
    return np.array(qr.matrix, dtype=bool)


def backend_identity(decoder: Decoder) -> dict:
    versions = {}
    for mod in ("segno", "zxingcpp", "cv2"):
        try:
            m = __import__(mod)
            versions[mod] = getattr(m, "__version__", "unknown")
        except ImportError:
            pass
    if "zxingcpp" in versions and versions["zxingcpp"] == "unknown":
        from importlib.metadata import PackageNotFoundError, version

        try:
            versions["zxingcpp"] = version("zxing-cpp")
        except PackageNotFoundError:
            pass
    name = getattr(decoder, "template", None) or decoder.name
    return {"decoder": name, "encoder": "segno", "versions": versions}
