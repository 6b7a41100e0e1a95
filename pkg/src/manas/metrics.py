"""PSNR and SSIM, plus test-set evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03

# Published full-scale results; they need ~100 GPU hours and are recorded for
# context only.
REFERENCE = {
    "DID-MDN": {"psnr": 32.60, "ssim": 0.922},
    "RainCityscapes": {"psnr": 35.19, "ssim": 0.984},
    "note": "full-scale, not desk-reproducible",
}


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _gaussian_window(dtype, device) -> torch.Tensor:
    r = torch.arange(WINDOW, dtype=torch.float64) - (WINDOW - 1) / 2
    g = torch.exp(-(r**2) / (2 * SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device)[None, None]


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Per-pixel SSIM over the valid region, shape (..., C, H-10, W-10)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() < 2 or a.shape[-1] < WINDOW or a.shape[-2] < WINDOW:
        raise ValueError(f"ssim: image {tuple(a.shape[-2:])} smaller than the {WINDOW}x{WINDOW} window")
    lead = a.shape[:-2]
    h, w = a.shape[-2:]
    x = a.reshape(-1, 1, h, w)
    y = b.reshape(-1, 1, h, w)
    win = _gaussian_window(x.dtype, x.device)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x * mu_x
    syy = F.conv2d(y * y, win) - mu_y * mu_y
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    out = num / den
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


def ssim(a, b, data_range: float = 1.0):
    """Mean SSIM of one (C, H, W) image pair, or per image for (B, C, H, W).

    Gaussian 11x11 window, sigma 1.5, computed per channel and averaged.
    Returns a tensor so it can sit inside a loss.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    m = ssim_map(a, b, data_range)
    if a.dim() <= 3:
        return m.mean()
    return m.flatten(start_dim=a.dim() - 3).mean(dim=-1)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; ``inf`` for identical images."""
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    peak: float = 1.0

    @property
    def count(self) -> int:
        return len(self.names)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def summary(self) -> dict:
        return {
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "count": self.count,
            "psnr_peak": self.peak,
            "reference": REFERENCE,
        }

    def write(self, directory, stem: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            ref = REFERENCE["DID-MDN"]
            fh.write(
                f"# reference DID-MDN {ref['psnr']:.2f} dB / {ref['ssim']:.3f} "
                f"({REFERENCE['note']})\n"
            )
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "ssim"])
            for n, p, s in zip(self.names, self.psnr, self.ssim):
                w.writerow([n, repr(p), repr(s)])
        json_path = directory / f"{stem}_summary.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return csv_path, json_path


@torch.no_grad()
def evaluate(net, pairs, peak: float = 1.0) -> MetricReport:
    """De-rain every rainy image of every pair and score it against its ground truth.

    ``net`` is any callable mapping a (B, 3, H, W) tensor to the same shape,
    typically a DISCRETE :class:`~manas.supernet.DerainNetwork`.
    """
    report = MetricReport(peak=peak)
    if hasattr(net, "eval"):
        net.eval()
    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float32
    for pair in pairs:
        rainy = torch.as_tensor(pair.rainy, dtype=dtype)
        gt = torch.as_tensor(pair.gt, dtype=torch.float64)
        out = net(rainy).to(torch.float64).clamp(0, 1)
        for i, sev in enumerate(pair.severities):
            report.names.append(f"{pair.stem}__{sev}")
            if peak == 1.0:
                report.psnr.append(psnr(out[i], gt))
            else:
                # score 8-bit quantized images against the given peak
                q = lambda x: torch.round(x * 255.0) * (peak / 255.0)
                report.psnr.append(psnr(q(out[i]), q(gt), peak=peak))
            report.ssim.append(float(ssim(out[i], gt)))
    return report
