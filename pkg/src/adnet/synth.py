"""Synthetic blurred-QR data: rendering, camera-shake PSFs, blur, datasets, augmentation."""

from __future__ import annotations

import json
import string
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from adnet.codec import encode, to_uint8
from adnet.errors import BackendUnavailableError, DimensionError, ManifestError, ParameterError

MANIFEST_NAME = "manifest"
SCHEMA_VERSION = 1
PAYLOAD_ALPHABET = string.ascii_uppercase + string.digits


# -- images --------------------------------------------------------------------

def load_image(path, channels: int = 3) -> np.ndarray:
    """Read an 8-bit PNG as an H x W x ``channels`` float32 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return np.repeat(arr[..., None], channels, axis=2)


def save_image(image: np.ndarray, path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="L").save(path, format="PNG")


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, i.e. what a saved-then-loaded image looks like."""
    return (to_uint8(image).astype(np.float32) / 255.0)[..., None].repeat(np.shape(image)[-1], axis=2)


def render_qr(payload: str, version: int | None = 1, ec_level: str = "M", module_pixels: int = 3,
              quiet_zone: int = 4, canvas: int | None = None) -> np.ndarray:
    """Sharp H x W x 3 QR image: dark modules 0, light 1, with a quiet zone.

    ``canvas`` pads (with white) to a square of that side, centering the symbol.
    """
    if module_pixels < 1 or quiet_zone < 0:
        raise ParameterError("module_pixels must be >= 1 and quiet_zone >= 0")
    matrix = encode(payload, version=version, ec_level=ec_level)
    light = np.pad(~matrix, quiet_zone, constant_values=True).astype(np.float32)
    img = np.kron(light, np.ones((module_pixels, module_pixels), dtype=np.float32))
    if canvas is not None:
        side = img.shape[0]
        if canvas < side:
            raise DimensionError(f"canvas {canvas} smaller than symbol of {side} pixels")
        before = (canvas - side) // 2
        img = np.pad(img, (before, canvas - side - before), constant_values=1.0)
    return np.repeat(img[..., None], 3, axis=2)


# -- point spread functions -----------------------------------------------------

@dataclass(frozen=True)
class BlurKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ParameterError(f"blur kernel must be square with odd size, got {w.shape}")
        if (w < 0).any() or not (w > 0).any():
            raise ParameterError("blur kernel weights must be non-negative with at least one positive")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ParameterError(f"blur kernel must sum to 1, sums to {w.sum()!r}")

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size: int = 1) -> "BlurKernel":
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    @classmethod
    def box(cls, length: int, horizontal: bool = True) -> "BlurKernel":
        w = np.zeros((length, length))
        if horizontal:
            w[length // 2, :] = 1.0 / length
        else:
            w[:, length // 2] = 1.0 / length
        return cls(w)


def camera_shake_trajectory(rng: np.random.Generator, steps: int, anxiety: float, length: float) -> np.ndarray:
    """Random-walk camera path with inertia, a centripetal pull and occasional jerks.

    Returns ``steps`` complex positions (x + iy) in pixels, the path having
    total arc length close to ``length``.
    """
    if steps == 1:
        return np.zeros(1, dtype=complex)
    step_len = length / (steps - 1)
    centripetal = 0.7 * rng.uniform()
    gaussian_term = 10.0 * rng.uniform()
    jerk_rate = 0.2 * rng.uniform()
    angle = rng.uniform(0.0, 2.0 * np.pi)
    v = step_len * np.exp(1j * angle)
    x = np.zeros(steps, dtype=complex)
    for t in range(steps - 1):
        jerk = 0.0
        if rng.uniform() < jerk_rate * anxiety:
            jerk = 2.0 * v * np.exp(1j * (np.pi + (rng.uniform() - 0.5)))
        noise = complex(rng.standard_normal(), rng.standard_normal())
        v = v + jerk + anxiety * (gaussian_term * noise - centripetal * x[t]) * step_len
        speed = abs(v)
        v = v / speed * step_len if speed > 0 else step_len * np.exp(1j * angle)
        x[t + 1] = x[t] + v
    return x


def gen_trajectory_psf(seed, steps: int = 64, anxiety: float = 0.1, max_extent: int = 15) -> BlurKernel:
    """Rasterize a camera-shake trajectory into a ``max_extent`` x ``max_extent`` PSF.

    Positions are splatted bilinearly, so sub-pixel motion is kept; the path is
    centred on its bounding box and shrunk if it would not fit.
    """
    if steps < 1:
        raise ParameterError(f"trajectory needs at least one step, got {steps}")
    if max_extent < 1 or max_extent % 2 == 0:
        raise ParameterError(f"max_extent must be a positive odd integer, got {max_extent}")
    if anxiety < 0:
        raise ParameterError(f"anxiety must be non-negative, got {anxiety}")
    rng = np.random.default_rng(seed)
    path = camera_shake_trajectory(rng, steps, anxiety, float(max_extent - 1))
    xs, ys = path.real, path.imag
    xs = xs - 0.5 * (xs.max() + xs.min())
    ys = ys - 0.5 * (ys.max() + ys.min())
    span = max(np.ptp(xs), np.ptp(ys))
    room = max_extent - 1
    if span > room:
        xs, ys = xs * (room / span), ys * (room / span)
    c = (max_extent - 1) / 2.0
    xs, ys = np.clip(xs + c, 0, max_extent - 1), np.clip(ys + c, 0, max_extent - 1)

    w = np.zeros((max_extent, max_extent))
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    x1, y1 = np.minimum(x0 + 1, max_extent - 1), np.minimum(y0 + 1, max_extent - 1)
    np.add.at(w, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(w, (y0, x1), fx * (1 - fy))
    np.add.at(w, (y1, x0), (1 - fx) * fy)
    np.add.at(w, (y1, x1), fx * fy)
    w[w < 0] = 0.0
    return BlurKernel(w / w.sum())


def apply_blur(image: np.ndarray, kernel: BlurKernel, noise_sigma: float = 0.0, seed=None) -> np.ndarray:
    """Convolve each channel with the PSF (reflect borders), add Gaussian noise, clamp to [0, 1]."""
    if noise_sigma < 0:
        raise ParameterError(f"noise sigma must be non-negative, got {noise_sigma}")
    image = np.asarray(image)
    if kernel.size > min(image.shape[:2]):
        raise DimensionError(f"kernel of size {kernel.size} larger than image {image.shape[:2]}")
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    out = np.empty(img.shape, dtype=np.float64)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.convolve(img[..., ch].astype(np.float64), kernel.weights, mode="reflect")
    if noise_sigma > 0:
        out += np.random.default_rng(seed).normal(0.0, noise_sigma, size=out.shape[:2])[..., None]
    out = np.clip(out, 0.0, 1.0).astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)
    return out[..., 0] if squeeze else out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur per channel (reflect borders); used as a controlled severity sweep."""
    image = np.asarray(image, dtype=np.float64)
    sig = (sigma, sigma, 0) if image.ndim == 3 else sigma
    return ndimage.gaussian_filter(image, sigma=sig, mode="reflect")


# -- datasets ------------------------------------------------------------------

@dataclass
class SynthParams:
    version: int = 1
    ec_level: str = "M"
    module_pixels: int = 3
    quiet_zone: int = 4
    canvas: int = 88
    payload_length: int = 10
    min_extent: int = 5
    max_extent: int = 13
    steps: int = 48
    anxiety: float = 0.1
    max_noise_sigma: float = 0.01

    @classmethod
    def from_dict(cls, data: dict) -> "SynthParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SamplePair:
    sharp: str
    blur: str
    payload: str
    kernel_seed: int
    kernel_extent: int
    noise_sigma: float
    noise_seed: int


@dataclass
class DatasetManifest:
    split: str
    entries: list
    generation: dict = field(default_factory=dict)
    root: Path | None = None
    schema_version: int = SCHEMA_VERSION
    channels: int = 1
    bit_depth: int = 8

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, relative: str) -> Path:
        return (self.root / relative) if self.root is not None else Path(relative)

    def load_pair(self, index: int, channels: int = 3):
        e = self.entries[index]
        return load_image(self.path(e.sharp), channels), load_image(self.path(e.blur), channels)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "split": self.split,
            "count": len(self.entries),
            "channels": self.channels,
            "bit_depth": self.bit_depth,
            "generation": self.generation,
            "entries": [asdict(e) for e in self.entries],
        }


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file (either the file or its split directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError("manifest not found", [path]) from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid structured text ({exc})", [path]) from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema {data.get('schema_version')!r}", [path])
    try:
        entries = [SamplePair(**e) for e in data["entries"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest entries ({exc})", [path]) from exc
    if data.get("count") != len(entries):
        raise ManifestError(f"header count {data.get('count')} != {len(entries)} entries", [path])
    rels = [e.sharp for e in entries] + [e.blur for e in entries]
    dupes = sorted({r for r in rels if rels.count(r) > 1})
    if dupes:
        raise ManifestError("duplicate image paths", dupes)
    manifest = DatasetManifest(split=data["split"], entries=entries, generation=data.get("generation", {}),
                               root=path.parent, channels=data.get("channels", 1),
                               bit_depth=data.get("bit_depth", 8))
    if check_files:
        missing = [manifest.path(r) for r in rels if not manifest.path(r).is_file()]
        if missing:
            raise ManifestError("manifest references missing files", missing)
    return manifest


def random_payloads(rng: np.random.Generator, count: int, length: int) -> list:
    seen, out = set(), []
    while len(out) < count:
        p = "".join(rng.choice(list(PAYLOAD_ALPHABET), size=length))
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _odd_between(rng: np.random.Generator, lo: int, hi: int) -> int:
    choices = [k for k in range(lo, hi + 1) if k % 2 == 1]
    if not choices:
        raise ParameterError(f"no odd kernel extent in [{lo}, {hi}]")
    return int(rng.choice(choices))


def _make_sample(args):
    split_dir, index, payload, sub_seed, params = args
    rng = np.random.default_rng(sub_seed)
    extent = _odd_between(rng, params.min_extent, params.max_extent)
    kernel_seed = int(rng.integers(2 ** 31))
    noise_seed = int(rng.integers(2 ** 31))
    noise_sigma = float(rng.uniform(0.0, params.max_noise_sigma))
    sharp = render_qr(payload, params.version, params.ec_level, params.module_pixels, params.quiet_zone,
                      params.canvas)
    kernel = gen_trajectory_psf(kernel_seed, params.steps, params.anxiety, extent)
    blurred = apply_blur(sharp, kernel, noise_sigma, noise_seed)
    name = f"{index:04d}.png"
    save_image(sharp, split_dir / "sharp" / name)
    save_image(blurred, split_dir / "blur" / name)
    return SamplePair(sharp=f"sharp/{name}", blur=f"blur/{name}", payload=payload, kernel_seed=kernel_seed,
                      kernel_extent=extent, noise_sigma=noise_sigma, noise_seed=noise_seed)


def build_dataset(root, n_train: int, n_test: int, params: SynthParams | None = None, seed: int = 0,
                  workers: int = 1):
    """Write ``<root>/{train,test}/{sharp,blur}/NNNN.png`` plus manifests; return both manifests.

    Every sample draws from its own sub-seed, so the result does not depend on
    ``workers``.
    """
    params = params or SynthParams()
    if params.min_extent > params.max_extent:
        raise ParameterError("min_extent must not exceed max_extent")
    root = Path(root)
    master = np.random.default_rng(seed)
    payloads = random_payloads(master, n_train + n_test, params.payload_length)
    seeds = np.random.SeedSequence(seed).spawn(n_train + n_test)
    generation = dict(asdict(params), seed=seed)

    manifests = []
    offset = 0
    for split, count in (("train", n_train), ("test", n_test)):
        split_dir = root / split
        try:
            (split_dir / "sharp").mkdir(parents=True, exist_ok=True)
            (split_dir / "blur").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise BackendUnavailableError(f"cannot create dataset directory {split_dir}: {exc}") from exc
        jobs = [(split_dir, i, payloads[offset + i], seeds[offset + i], params) for i in range(count)]
        offset += count
        if workers > 1 and count > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                entries = list(pool.map(_make_sample, jobs))
        else:
            entries = [_make_sample(j) for j in jobs]
        manifest = DatasetManifest(split=split, entries=entries, generation=generation, root=split_dir)
        write_manifest(manifest, split_dir / MANIFEST_NAME)
        manifests.append(manifest)
    return manifests[0], manifests[1]


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentDraw":
        return cls(bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4)))


def apply_augment(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    if draw.rot90 % 2 and image.shape[0] != image.shape[1]:
        raise DimensionError(f"90-degree rotation needs a square patch, got {image.shape[:2]}")
    out = image
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1]
    if draw.rot90:
        out = np.rot90(out, draw.rot90, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment(sharp: np.ndarray, blurred: np.ndarray, seed=None, draw: AugmentDraw | None = None):
    """Apply one random flip/rotation draw identically to both members of a pair."""
    if sharp.shape != blurred.shape:
        raise DimensionError(f"pair members differ in shape: {sharp.shape} vs {blurred.shape}")
    if draw is None:
        draw = AugmentDraw.sample(np.random.default_rng(seed))
    return apply_augment(sharp, draw), apply_augment(blurred, draw), draw
