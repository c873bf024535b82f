"""Images, noise obfuscation, splits, sharding and the dataset manifest."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DecodeError, DomainError, FormatError
from .nn import resample2d
from .rng import box_muller, fisher_yates, keyed_generator

MANIFEST_VERSION = 1
DEFAULT_FRACTIONS = (0.5, 0.33, 0.17)


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # float32 [H, W] in [0, 1]
    path: str | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class NoiseSpec:
    mean: float = 0.1
    sigma: float = 0.1
    seed: int = 0
    clamp: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


# -- image files ---------------------------------------------------------------------

def decode_image(path: str | os.PathLike, id: str | None = None) -> ImageRecord:
    """Read an 8-bit grayscale PGM (P5) or PNG into [0, 1] floats."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise FormatError(f"{path}: unsupported format {im.format}")
            if im.mode != "L":
                raise FormatError(f"{path}: need 8-bit grayscale, got mode {im.mode}")
            im.load()
            raw = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a PGM or PNG image") from exc
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    pixels = (raw.astype(np.float32) / np.float32(255.0))
    return ImageRecord(id or path.stem, pixels, str(path))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half away from zero."""
    v = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_image(rec: ImageRecord | np.ndarray, path: str | os.PathLike) -> None:
    pixels = rec.pixels if isinstance(rec, ImageRecord) else rec
    path = Path(path)
    fmt = {".png": "PNG", ".pgm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise FormatError(f"{path}: write .png or .pgm")
    Image.fromarray(quantize(pixels)).save(path, format=fmt)


# -- transforms ------------------------------------------------------------------------

def resize_bilinear(rec: ImageRecord, to: int) -> ImageRecord:
    if to < 1:
        raise ConfigError("resize target must be >= 1")
    if rec.pixels.shape == (to, to):
        return ImageRecord(rec.id, rec.pixels.copy(), rec.path)
    out = resample2d(rec.pixels.astype(np.float64), to, to)
    return ImageRecord(rec.id, np.clip(out, 0.0, 1.0).astype(np.float32), rec.path)


def noise_field(spec: NoiseSpec, id: str, shape) -> np.ndarray:
    """The additive noise for one image; depends only on (seed, id)."""
    n = int(np.prod(shape))
    z = box_muller(keyed_generator(spec.seed, "noise", id), n)
    return (spec.mean + spec.sigma * z).reshape(shape)


def corrupt(rec: ImageRecord, spec: NoiseSpec) -> ImageRecord:
    out = rec.pixels.astype(np.float64) + noise_field(spec, rec.id, rec.pixels.shape)
    if spec.clamp:
        out = np.clip(out, 0.0, 1.0)
    return ImageRecord(rec.id, out.astype(np.float32), rec.path)


# -- splitting, sharding, batching -----------------------------------------------------

def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    n_val = math.floor(n * f_val + 1e-9)
    n_test = math.floor(n * f_test + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(ids: Sequence[str], fractions=DEFAULT_FRACTIONS, seed: int = 0) -> dict[str, list[str]]:
    """Seeded Fisher-Yates shuffle, then contiguous train/val/test slices.

    Validation and test sizes are floored; train takes the remainder.
    """
    if not ids:
        raise DomainError("cannot split an empty id list")
    n_train, n_val, _ = split_counts(len(ids), fractions)
    order = [ids[i] for i in fisher_yates(len(ids), keyed_generator(seed, "split"))]
    return {"train": order[:n_train],
            "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}


def shard_indices(n: int, world: int, rank: int, epoch: int = 0,
                  shuffle: bool = False, seed: int = 0) -> list[int]:
    """Indices for one rank, padded from the front so every rank gets the same count."""
    if world <= 0:
        raise ConfigError(f"world size must be positive, got {world}")
    if not 0 <= rank < world:
        raise ConfigError(f"rank {rank} outside [0, {world})")
    order = fisher_yates(n, keyed_generator(seed, "epoch", epoch)) if shuffle else list(range(n))
    total = -(-n // world) * world
    padded = list(order)
    while len(padded) < total:
        padded.extend(order[:total - len(padded)])
    return padded[rank:total:world]


def make_batches(indices: Sequence[int], batch_size: int, drop_last: bool = False) -> list[list[int]]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    batches = [list(indices[i:i + batch_size]) for i in range(0, len(indices), batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# -- synthetic phantoms ----------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def render_phantom(size: int, seed: int, index: int) -> np.ndarray:
    """A chest-radiograph-like test image: dark field, bright thorax, ribs, diaphragm."""
    rng = keyed_generator(seed, "phantom", index)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    y = (y + 0.5) / size * 2 - 1
    x = (x + 0.5) / size * 2 - 1
    edge = size / 8.0

    img = np.full((size, size), rng.uniform(0.03, 0.08))
    cx, cy = rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)
    rx, ry = rng.uniform(0.65, 0.85), rng.uniform(0.75, 0.92)
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    thorax = _sigmoid((1.0 - r) * edge * 2)
    img += rng.uniform(0.35, 0.5) * thorax

    # darker lung fields with periodic rib bands across them
    lung = np.zeros_like(img)
    for side in (-1, 1):
        lx = cx + side * rng.uniform(0.3, 0.38)
        lr = np.sqrt(((x - lx) / rng.uniform(0.2, 0.27)) ** 2 + ((y - cy + 0.1) / rng.uniform(0.5, 0.6)) ** 2)
        lung = np.maximum(lung, _sigmoid((1.0 - lr) * edge * 1.5))
    img -= rng.uniform(0.12, 0.2) * lung
    freq, phase, tilt = rng.uniform(9.0, 14.0), rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 0.5)
    ribs = np.sin(freq * (y + tilt * np.abs(x - cx)) + phase) ** 2
    img += rng.uniform(0.08, 0.15) * ribs * lung

    # diaphragm: bright dome below a parabola
    dy, curv = rng.uniform(0.35, 0.55), rng.uniform(0.5, 0.9)
    dome = _sigmoid((y - (dy + curv * (x - cx) ** 2)) * edge * 2)
    img += rng.uniform(0.2, 0.3) * dome * thorax
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic_phantoms(count: int, size: int, seed: int = 0) -> list[ImageRecord]:
    return [ImageRecord(f"phantom_{i:05d}", render_phantom(size, seed, i)) for i in range(count)]


# -- manifest --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list[dict]
    split: dict[str, list[str]]
    resize_to: int
    created_seed: int
    noise: NoiseSpec | None = None
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False, repr=False)

    def validate(self, need_noisy: bool = False) -> None:
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest has duplicate ids")
        parts = [set(self.split.get(k, [])) for k in ("train", "val", "test")]
        if sum(len(p) for p in parts) != len(set().union(*parts)):
            raise ConfigError("manifest splits overlap")
        if set().union(*parts) != set(ids):
            raise ConfigError("manifest splits do not cover every record")
        if need_noisy:
            if self.noise is None:
                raise ConfigError("manifest has no noise spec; run corrupt first")
            for r in self.records:
                if not r.get("noisy") or not (self.root / r["noisy"]).exists():
                    raise ConfigError(f"noisy image missing for {r['id']}")

    def to_json(self) -> str:
        body = {"version": self.version, "records": self.records, "split": self.split,
                "noise": asdict(self.noise) if self.noise else None,
                "resize_to": self.resize_to, "created_seed": self.created_seed}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc
        if body.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {body.get('version')}")
        noise = NoiseSpec(**body["noise"]) if body.get("noise") else None
        return cls(body["records"], body["split"], body["resize_to"], body["created_seed"],
                   noise, body["version"], path.parent)

    def record(self, id: str) -> dict:
        for r in self.records:
            if r["id"] == id:
                return r
        raise KeyError(id)

    def load_pairs(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """(noisy, clean) stacks shaped [n, 1, S, S] in float32."""
        noisy, clean = [], []
        for id in ids:
            r = self.record(id)
            clean.append(decode_image(self.root / r["clean"], id).pixels)
            noisy.append(decode_image(self.root / r["noisy"], id).pixels)
        return np.stack(noisy)[:, None], np.stack(clean)[:, None]


def write_clean_set(records: Sequence[ImageRecord], out_dir: Path, manifest_dir: Path) -> list[dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        dest = out_dir / f"{rec.id}.png"
        encode_image(rec, dest)
        rows.append({"id": rec.id, "clean": os.path.relpath(dest, manifest_dir), "noisy": None})
    return rows


def corrupt_manifest(manifest: DatasetManifest, spec: NoiseSpec, out_dir: Path | None = None) -> DatasetManifest:
    """Write a noisy copy of every clean image and record the noise spec."""
    out_dir = out_dir or manifest.root / "noisy"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for r in manifest.records:
        clean = decode_image(manifest.root / r["clean"], r["id"])
        dest = out_dir / f"{r['id']}.png"
        encode_image(corrupt(clean, spec), dest)
        records.append({**r, "noisy": os.path.relpath(dest, manifest.root)})
    return DatasetManifest(records, manifest.split, manifest.resize_to, manifest.created_seed,
                           spec, manifest.version, manifest.root)
