"""Image-quality and region-volume metrics.

Scores predicted follow-up images against ground truth: PSNR, SSIM with
the standard 11x11 Gaussian window, and per-region volume error expressed
as a percentage of total brain area.  EvalReport collects per-pair rows
and serializes a CSV with a trailing mean-and-spread summary row.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .synthdata import REGION_ORDER, _atomic_write

METRIC_COLUMNS = ("psnr_db", "ssim") + tuple(f"mae_{r}" for r in REGION_ORDER)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2D grayscale images, got ndim={a.ndim}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean local SSIM over all fully-interior Gaussian-weighted windows."""
    a, b = _check_pair(a, b)
    if min(a.shape) < window:
        raise ValueError(
            f"image {a.shape} smaller than the {window}x{window} SSIM window")
    w = _gaussian_window(window, sigma)
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = np.einsum("ijkl,kl->ij", wa, w)
    mu_b = np.einsum("ijkl,kl->ij", wb, w)
    da = wa - mu_a[:, :, None, None]
    db = wb - mu_b[:, :, None, None]
    var_a = np.einsum("ijkl,kl->ij", da * da, w)
    var_b = np.einsum("ijkl,kl->ij", db * db, w)
    cov = np.einsum("ijkl,kl->ij", da * db, w)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def region_volume_mae(pred, gt, masks, brain_mask) -> dict:
    """Per-region |volume(pred) - volume(gt)| as % of brain area.

    Volume counts pixels above 0.5 inside the ground-truth region mask.
    """
    pred, gt = _check_pair(pred, gt)
    brain = np.asarray(brain_mask, dtype=bool)
    area = int(brain.sum())
    if area == 0:
        raise ValueError("empty brain mask")
    out = {}
    for name in REGION_ORDER:
        m = np.asarray(masks[name], dtype=bool)
        v_pred = int(np.count_nonzero((pred > 0.5) & m))
        v_gt = int(np.count_nonzero((gt > 0.5) & m))
        out[name] = abs(v_pred - v_gt) / area * 100.0
    return out


def score_pair(pred, gt, masks, brain_mask) -> dict:
    """All metric columns for one (prediction, ground-truth) pair."""
    vals = {"psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt)}
    for name, v in region_volume_mae(pred, gt, masks, brain_mask).items():
        vals[f"mae_{name}"] = v
    return vals


class EvalReport:
    """Per-pair metric rows plus cohort mean and standard deviation.

    One row per (subject, visit pair); the summary uses the population
    standard deviation so a single-row report still formats cleanly.
    """

    def __init__(self):
        self.rows = []

    def add(self, subject: str, visit_pair: str, values: dict):
        for col in METRIC_COLUMNS:
            if col not in values:
                raise ValueError(f"missing metric column {col}")
        self.rows.append((subject, visit_pair,
                          {c: float(values[c]) for c in METRIC_COLUMNS}))

    def __len__(self):
        return len(self.rows)

    def column(self, col: str):
        return np.array([vals[col] for _, _, vals in self.rows])

    def summary(self) -> dict:
        if not self.rows:
            raise ValueError("empty report")
        out = {}
        # oracle-mode PSNR columns hold inf; std of those is quietly nan
        with np.errstate(invalid="ignore"):
            for col in METRIC_COLUMNS:
                xs = self.column(col)
                out[col] = (float(np.mean(xs)), float(np.std(xs)))
        return out

    def write_csv(self, path):
        lines = ["subject,visit_pair," + ",".join(METRIC_COLUMNS)]
        for subject, pair, vals in self.rows:
            cells = [subject, pair] + [str(vals[c]) for c in METRIC_COLUMNS]
            lines.append(",".join(cells))
        summ = self.summary()
        cells = ["summary", ""]
        cells += [f"{m} ± {s}" for m, s in (summ[c] for c in METRIC_COLUMNS)]
        lines.append(",".join(cells))
        _atomic_write(path, ("\n".join(lines) + "\n").encode())

    def format_summary(self) -> str:
        summ = self.summary()
        width = max(len(c) for c in METRIC_COLUMNS)
        lines = [f"pairs evaluated: {len(self.rows)}"]
        for col in METRIC_COLUMNS:
            m, s = summ[col]
            lines.append(f"  {col:<{width}}  {m:.4f} ± {s:.4f}")
        return "\n".join(lines)
