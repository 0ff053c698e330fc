"""PSNR/SSIM evaluation over a dataset manifest, grouped by frame count."""

import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .dataio import load_image, read_manifest, save_image
from .errors import InvalidInputError

log = logging.getLogger(__name__)

BUILTIN_METRICS = ("psnr", "ssim")


def psnr(a, b, max_val=1.0):
    """Peak signal-to-noise ratio in dB; math.inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def ssim(a, b, max_val=1.0, k1=0.01, k2=0.03, window_size=11, sigma=1.5):
    """Mean local structural similarity on luma with a Gaussian window."""
    x = _to_luma(a)
    y = _to_luma(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < window_size:
        raise InvalidInputError(
            f"images of shape {x.shape} are smaller than the {window_size}x{window_size} window"
        )
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    xx = convolve2d(x * x, win, mode="valid") - mu_x ** 2
    yy = convolve2d(y * y, win, mode="valid") - mu_y ** 2
    xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class GroupStats:
    n_pairs: int = 0
    psnr_sum: float = 0.0       # finite values only
    psnr_finite: int = 0
    psnr_inf: int = 0
    ssim_sum: float = 0.0
    extra_sums: dict = field(default_factory=dict)
    extra_counts: dict = field(default_factory=dict)

    def add(self, psnr_value, ssim_value, extras=None):
        self.n_pairs += 1
        if math.isinf(psnr_value):
            self.psnr_inf += 1
        else:
            self.psnr_sum += psnr_value
            self.psnr_finite += 1
        self.ssim_sum += ssim_value
        for name, value in (extras or {}).items():
            self.extra_sums[name] = self.extra_sums.get(name, 0.0) + value
            self.extra_counts[name] = self.extra_counts.get(name, 0) + 1

    @property
    def psnr_mean(self):
        if self.psnr_finite:
            return self.psnr_sum / self.psnr_finite
        return math.inf if self.psnr_inf else math.nan

    @property
    def ssim_mean(self):
        return self.ssim_sum / self.n_pairs if self.n_pairs else math.nan

    def extras_mean(self):
        return {k: self.extra_sums[k] / self.extra_counts[k] for k in self.extra_sums}


@dataclass
class EvalReport:
    per_group: dict = field(default_factory=dict)  # n_frames -> GroupStats
    overall: GroupStats = field(default_factory=GroupStats)

    def group_row(self, key):
        stats = self.overall if key == "ALL" else self.per_group[key]
        row = {
            "gt_frames": key,
            "pairs": stats.n_pairs,
            "psnr": stats.psnr_mean,
            "ssim": stats.ssim_mean,
            "psnr_inf_pairs": stats.psnr_inf,
        }
        row.update(stats.extras_mean())
        return row

    def rows(self):
        return [self.group_row(k) for k in sorted(self.per_group)] + [self.group_row("ALL")]


def _wrap_generator(generator):
    """Accept a checkpoint path, a generator module, or a plain callable."""
    if callable(generator) and not hasattr(generator, "restore"):
        return generator
    if hasattr(generator, "restore"):
        return generator.restore
    raise InvalidInputError("generator must be a checkpoint path, module or callable")


def evaluate_dataset(manifest_path, generator, metrics=("psnr", "ssim"),
                     plugins=None) -> EvalReport:
    """Restore every ground-truth moment of every record and aggregate metrics.

    ``generator`` may be a checkpoint path, a DeblurGenerator, or any callable
    (blur_array, u) -> restored_array. ``plugins`` maps metric names to
    callables over (restored_path, gt_path, blur_path); plugin failures are
    logged and skipped.
    """
    for name in metrics:
        if name not in BUILTIN_METRICS:
            raise InvalidInputError(f"unknown metric {name!r}")
    if isinstance(generator, (str, Path)):
        from .checkpoint import load_generator
        generator = load_generator(generator)
    restore = _wrap_generator(generator)

    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if not manifest.records:
        raise InvalidInputError(f"manifest {manifest_path} has no records")
    root = manifest_path.parent

    report = EvalReport()
    tmpdir = Path(tempfile.mkdtemp(prefix="facedeblur_eval_")) if plugins else None

    for rec in manifest.records:
        blur = load_image(root / rec.blur_path)
        group = report.per_group.setdefault(rec.n_frames, GroupStats())
        for gt_rel, u in zip(rec.gt_paths, rec.control_factors):
            gt = load_image(root / gt_rel)
            restored = np.clip(restore(blur, u), 0.0, 1.0)
            p = psnr(restored, gt) if "psnr" in metrics else math.nan
            s = ssim(restored, gt) if "ssim" in metrics else math.nan
            extras = {}
            if plugins:
                restored_path = tmpdir / "restored.png"
                save_image(restored_path, restored)
                for name, fn in plugins.items():
                    try:
                        extras.update(fn(restored_path, root / gt_rel, root / rec.blur_path))
                    except Exception:
                        log.warning("metric plugin %r failed; reported as absent", name,
                                    exc_info=True)
            group.add(p, s, extras)
            report.overall.add(p, s, extras)
    return report


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def _fmt(value, nd=4):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "-"
        return f"{value:.{nd}f}"
    return str(value)


def write_report(report: EvalReport, out_path):
    """Emit the report as line-delimited JSON plus an aligned text table."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")

    columns = ["gt_frames", "pairs", "psnr", "ssim"]
    extra_cols = sorted(set().union(*(set(r) - set(columns) - {"psnr_inf_pairs"} for r in rows)))
    columns += extra_cols
    table = [columns] + [[_fmt(row.get(c, "-")) for c in columns] for row in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(columns))]
    text_path = out_path.with_suffix(out_path.suffix + ".txt")
    with open(text_path, "w", encoding="utf-8") as fh:
        for line in table:
            fh.write("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) + "\n")
    return out_path, text_path
