"""Synthetic crowd scenes, dataset files and a PGM/CSV converter.

Coordinates are continuous (row, col) positions in input pixels; pixel i
covers [i, i + 1) so its centre is i + 0.5. The density map lives at 1/4
resolution, where a head at (r, c) sits at (r / 4, c / 4).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .numerics import FormatError, tensor_from_file_bytes, tensor_to_file_bytes
from .rng import CounterRNG

DATA_STREAM = 100
MANIFEST = "manifest.json"
MANIFEST_FORMAT = 1
TRUNCATE_SIGMAS = 4.0


class DatasetError(FormatError):
    """Manifest and files disagree, or a file is missing."""


class AnnotationError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    gt_density: np.ndarray  # (1, H/4, W/4)
    true_count: int
    head_positions: list[tuple[float, float]] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.true_count == other.true_count
            and self.head_positions == other.head_positions
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.gt_density, other.gt_density)
        )


@dataclass
class Dataset:
    samples: list[Sample]
    config: SceneConfig | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def densities(self) -> np.ndarray:
        return np.stack([s.gt_density for s in self.samples])

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.config)


def _axis_weights(center: float, n: int, sigma: float):
    """Unnormalised 1-D Gaussian weights at pixel centres within 4 sigma."""
    reach = int(math.ceil(TRUNCATE_SIGMAS * sigma)) + 1
    base = int(math.floor(center))
    idx = np.arange(base - reach, base + reach + 1)
    d = idx + 0.5 - center
    return idx, d, np.exp(-(d**2) / (2.0 * sigma**2))


def _lattice_mass(center: float, sigma: float) -> float:
    """Sum of the 1-D Gaussian over the whole (unbounded) pixel lattice."""
    reach = int(math.ceil(12.0 * sigma)) + 1
    base = int(math.floor(center))
    d = np.arange(base - reach, base + reach + 1) + 0.5 - center
    return float(np.exp(-(d**2) / (2.0 * sigma**2)).sum())


def head_kernel(r: float, c: float, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Discrete Gaussian for one head, normalised on the unbounded lattice,
    truncated to a 4-sigma disc, with mass that falls off the canvas folded
    back onto the in-canvas part of the disc."""
    h, w = shape
    ri, rd, rw = _axis_weights(r, h, sigma)
    ci, cd, cw = _axis_weights(c, w, sigma)
    k = np.outer(rw, cw) / (_lattice_mass(r, sigma) * _lattice_mass(c, sigma))
    k[(rd[:, None] ** 2 + cd[None, :] ** 2) > (TRUNCATE_SIGMAS * sigma) ** 2] = 0.0
    disc = k.sum()
    rin = (ri >= 0) & (ri < h)
    cin = (ci >= 0) & (ci < w)
    inside = k[np.ix_(rin, cin)]
    out = np.zeros(shape)
    total_in = inside.sum()
    if total_in > 0:
        out[np.ix_(ri[rin], ci[cin])] = inside * (disc / total_in)
    return out


def density_map(heads, out_shape: tuple[int, int], sigma: float) -> np.ndarray:
    den = np.zeros(out_shape)
    for r, c in heads:
        den += head_kernel(r / 4.0, c / 4.0, out_shape, sigma)
    return den[None]


def render_image(heads, canvas, sigma: float, amplitude: float, noise) -> np.ndarray:
    h, w = canvas
    img = np.zeros(canvas)
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    for r, c in heads:
        img += amplitude * np.outer(
            np.exp(-((rows - r) ** 2) / (2 * sigma**2)),
            np.exp(-((cols - c) ** 2) / (2 * sigma**2)),
        )
    return np.clip(img + noise, 0.0, 1.0)[None]


def generate(cfg: SceneConfig, n: int, stream: int = 0) -> Dataset:
    """``n`` scenes from the seeded stream ``stream`` (train and test use different streams)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = CounterRNG.from_seed(cfg.seed).split(DATA_STREAM + stream)
    h, w = cfg.canvas
    lo, hi = cfg.count_range
    samples = []
    for _ in range(n):
        count = int(rng.integers(lo, hi, 1)[0])
        rows = rng.uniform(0.0, h, count)
        cols = rng.uniform(0.0, w, count)
        heads = [(float(r), float(c)) for r, c in zip(rows, cols)]
        noise = rng.normal(h * w).reshape(h, w) * cfg.noise_std
        image = render_image(heads, cfg.canvas, cfg.head_sigma_px, cfg.head_amplitude, noise)
        den = density_map(heads, (h // 4, w // 4), cfg.gt_sigma_px)
        samples.append(Sample(image, den, count, heads))
    return Dataset(samples, cfg)


# -- files --------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        img_name, den_name = f"image_{i:05d}.btnt", f"density_{i:05d}.btnt"
        (path / img_name).write_bytes(tensor_to_file_bytes(s.image))
        (path / den_name).write_bytes(tensor_to_file_bytes(s.gt_density))
        entries.append(
            {
                "image": img_name,
                "density": den_name,
                "true_count": s.true_count,
                "heads": [list(p) for p in s.head_positions],
            }
        )
    manifest = {
        "format": MANIFEST_FORMAT,
        "config": ds.config.model_dump(mode="json") if ds.config else None,
        "n": len(entries),
        "samples": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{path / MANIFEST}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path / MANIFEST}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"unsupported manifest format {manifest.get('format')!r}")
    entries = manifest["samples"]
    if manifest["n"] != len(entries):
        raise DatasetError(f"manifest declares n={manifest['n']} but lists {len(entries)} samples")
    samples = []
    for e in entries:
        tensors = []
        for key in ("image", "density"):
            f = path / e[key]
            if not f.is_file():
                raise DatasetError(f"missing sample file: {e[key]}")
            tensors.append(tensor_from_file_bytes(f.read_bytes(), e[key]))
        heads = [(float(r), float(c)) for r, c in e["heads"]]
        samples.append(Sample(tensors[0], tensors[1], int(e["true_count"]), heads))
    cfg = SceneConfig.model_validate(manifest["config"]) if manifest["config"] else None
    return Dataset(samples, cfg)


# -- real data ----------------------------------------------------------------


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary (P5) 8-bit PGM as a (H, W) uint8 array and its maxval."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w), maxval


def convert_annotated(image_path, heads_path, gt_sigma_px: float = 1.5) -> Sample:
    """Real image plus ``row,col`` head annotations (pixel indices) to a Sample."""
    pix, maxval = read_pgm(image_path)
    h, w = pix.shape
    if h % 4 or w % 4:
        raise AnnotationError(f"image extents {h}x{w} must be multiples of 4")
    heads = []
    text = Path(heads_path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            r, c = (float(v) for v in line.split(","))
        except ValueError:
            if i == 0:
                continue  # header row
            raise AnnotationError(f"row {i}: expected 'row,col', got {line!r}") from None
        if not (0 <= r < h and 0 <= c < w):
            raise AnnotationError(f"row {i}: head ({r}, {c}) outside the {h}x{w} image")
        heads.append((r + 0.5, c + 0.5))
    image = (pix.astype(np.float64) / maxval)[None]
    den = density_map(heads, (h // 4, w // 4), gt_sigma_px)
    return Sample(image, den, len(heads), heads)
