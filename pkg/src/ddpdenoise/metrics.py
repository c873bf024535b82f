"""PSNR, SSIM, confidence intervals, test-set evaluation and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, encode_image
from .errors import DomainError, SizeError
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

Z95 = 1.96
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeError(f"psnr: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_val * max_val / mse))


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov, c1, c2):
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable correlation, valid region only
    k = w.size
    h, wd = img.shape
    rows = sum(w[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(w[j] * rows[:, j:wd - k + 1 + j] for j in range(k))


def ssim(a, b, variant: str = "windowed", data_range: float = 1.0) -> float:
    """Structural similarity of two grayscale images.

    ``global`` evaluates the index once with whole-image (biased) statistics.
    ``windowed`` evaluates it under an 11x11 Gaussian window (sigma 1.5) at
    every fully-contained position and averages.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeError(f"ssim: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise SizeError("ssim expects 2-d images")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    if variant == "global":
        mu_a, mu_b = a.mean(), b.mean()
        da, db = a - mu_a, b - mu_b
        return float(_ssim_formula(mu_a, mu_b, (da * da).mean(), (db * db).mean(),
                                   (da * db).mean(), c1, c2))
    if variant != "windowed":
        raise ValueError(f"unknown ssim variant {variant!r}")
    if min(a.shape) < SSIM_WINDOW:
        raise SizeError(f"windowed ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    return float(np.mean(_ssim_formula(mu_a, mu_b, var_a, var_b, cov, c1, c2)))


def confidence_interval(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width (normal quantile, sample std)."""
    if len(values) < 2:
        raise DomainError("a confidence interval needs at least two values")
    mean = statistics.fmean(values)
    return mean, Z95 * statistics.stdev(values) / math.sqrt(len(values))


@dataclass
class MetricSummary:
    metric: str
    n: int
    mean: float
    std: float
    ci95: float
    per_image: list[tuple[str, float]]
    excluded: int = 0
    variant: str | None = None

    def formatted(self, digits: int | None = None) -> str:
        """Row text like ``34.95 (±0.04)``."""
        if digits is None:
            digits = 2 if self.metric == "psnr" else 4
        return f"{self.mean:.{digits}f} (±{self.ci95:.{digits}f})"


def summarize(metric: str, per_image: Sequence[tuple[str, float]], variant: str | None = None) -> MetricSummary:
    """Aggregate per-image values; infinite PSNRs are dropped and counted."""
    kept = [(i, v) for i, v in per_image if math.isfinite(v)]
    excluded = len(per_image) - len(kept)
    if excluded:
        log.info("%s: excluded %d infinite values from aggregation", metric, excluded)
    values = [v for _, v in kept]
    n = len(values)
    if n >= 2:
        mean, ci = confidence_interval(values)
        std = statistics.stdev(values)
    elif n == 1:
        mean, std, ci = values[0], 0.0, 0.0
    else:
        mean = std = ci = math.nan
    return MetricSummary(metric, n, mean, std, ci, list(kept), excluded, variant)


def predict(g, noisy: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Deepest-head predictions clamped to [0, 1]."""
    outs = []
    with no_grad():
        for start in range(0, len(noisy), batch_size):
            outs.append(g.forward(Tensor(noisy[start:start + batch_size]), "eval")[-1].data)
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def evaluate_arrays(g, ids: Sequence[str], noisy: np.ndarray, clean: np.ndarray,
                    variant: str = "windowed") -> dict[str, MetricSummary]:
    if len(ids) == 0:
        raise DomainError("test split is empty")
    pred = predict(g, noisy)
    p_vals = [(i, psnr(pred[k, 0], clean[k, 0])) for k, i in enumerate(ids)]
    s_vals = [(i, ssim(pred[k, 0], clean[k, 0], variant)) for k, i in enumerate(ids)]
    return {"psnr": summarize("psnr", p_vals), "ssim": summarize("ssim", s_vals, variant)}


def evaluate_testset(g, manifest: DatasetManifest, split: str = "test",
                     variant: str = "windowed") -> dict[str, MetricSummary]:
    ids = manifest.split.get(split, [])
    if not ids:
        raise DomainError(f"{split} split is empty")
    noisy, clean = manifest.load_pairs(ids)
    return evaluate_arrays(g, ids, noisy, clean, variant)


def noisy_baseline(manifest: DatasetManifest, split: str = "test",
                   variant: str = "windowed") -> dict[str, MetricSummary]:
    """Metrics of the noisy inputs themselves against the clean targets."""
    ids = manifest.split[split]
    noisy, clean = manifest.load_pairs(ids)
    p_vals = [(i, psnr(noisy[k, 0], clean[k, 0])) for k, i in enumerate(ids)]
    s_vals = [(i, ssim(noisy[k, 0], clean[k, 0], variant)) for k, i in enumerate(ids)]
    return {"psnr": summarize("psnr", p_vals), "ssim": summarize("ssim", s_vals, variant)}


def table_row(label: str, summaries: dict[str, MetricSummary]) -> str:
    return f"{label:<24} PSNR {summaries['psnr'].formatted()}  SSIM {summaries['ssim'].formatted()}"


# -- figures -------------------------------------------------------------------------

GRID_GAP = 2


def grid_image(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Tile rows of (noisy, unet, unetpp, clean) with white 2-pixel gaps."""
    if not rows:
        raise SizeError("no rows to render")
    th, tw = np.asarray(rows[0][0]).shape
    n_rows, n_cols = len(rows), len(rows[0])
    canvas = np.ones((n_rows * th + (n_rows - 1) * GRID_GAP,
                      n_cols * tw + (n_cols - 1) * GRID_GAP), dtype=np.float32)
    for r, row in enumerate(rows):
        if len(row) != n_cols:
            raise SizeError("ragged grid row")
        for c, tile in enumerate(row):
            tile = np.asarray(tile)
            if tile.shape != (th, tw):
                raise SizeError(f"tile {r},{c} is {tile.shape}, expected {(th, tw)}")
            y, x = r * (th + GRID_GAP), c * (tw + GRID_GAP)
            canvas[y:y + th, x:x + tw] = np.clip(tile, 0.0, 1.0)
    return canvas


def render_grid(rows: Sequence[Sequence[np.ndarray]], path: str | os.PathLike) -> np.ndarray:
    canvas = grid_image(rows)
    encode_image(canvas, path)
    return canvas


# -- reports -------------------------------------------------------------------------

REPORT_COLUMNS = ["noise_level", "model", "mode", "workers", "amp", "psnr_mean", "psnr_ci",
                  "ssim_mean", "ssim_ci", "train_seconds", "ts_percent"]


@dataclass
class ReportRow:
    noise_level: float
    model: str
    mode: str
    workers: int
    amp: bool
    psnr: MetricSummary | None = None
    ssim: MetricSummary | None = None
    train_seconds: float | None = None
    ts_percent: float | None = None

    def flat(self) -> dict:
        return {"noise_level": self.noise_level, "model": self.model, "mode": self.mode,
                "workers": self.workers, "amp": self.amp,
                "psnr_mean": self.psnr.mean if self.psnr else None,
                "psnr_ci": self.psnr.ci95 if self.psnr else None,
                "ssim_mean": self.ssim.mean if self.ssim else None,
                "ssim_ci": self.ssim.ci95 if self.ssim else None,
                "train_seconds": self.train_seconds, "ts_percent": self.ts_percent}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(rows: Sequence[ReportRow], path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and a JSON mirror ``<path>.json`` with per-image values."""
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.flat().items()})
    body = []
    for row in rows:
        item = row.flat()
        for key in ("psnr", "ssim"):
            summary = getattr(row, key)
            item[key] = asdict(summary) if summary else None
        body.append(item)
    json_path.write_text(json.dumps(body, indent=2, allow_nan=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_report_csv(path: str | os.PathLike) -> list[dict]:
    """Parse a report CSV back into typed values."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            item = {}
            for k, v in rec.items():
                if v == "":
                    item[k] = None
                elif k in ("model", "mode"):
                    item[k] = v
                elif k == "workers":
                    item[k] = int(v)
                elif k == "amp":
                    item[k] = v == "True"
                else:
                    item[k] = float(v)
            out.append(item)
    return out
