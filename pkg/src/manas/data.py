"""Multi-to-one rain data: synthesis, on-disk layout, splits and augmentation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

SEVERITIES = ("light", "medium", "heavy")

# Per severity: fraction of noise pixels zeroed, streak length (px), gain.
RAIN_PARAMS = {
    "light": {"quantile": 0.992, "length": 7, "gain": 0.6},
    "medium": {"quantile": 0.985, "length": 11, "gain": 0.8},
    "heavy": {"quantile": 0.975, "length": 15, "gain": 1.0},
}
ANGLE_RANGE = (60.0, 120.0)


def derive_seed(*keys) -> int:
    """Stable 32-bit seed from a tuple of ints/strings."""
    ints = [k if isinstance(k, int) else int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little")
            for k in keys]
    return int(np.random.SeedSequence([abs(i) for i in ints]).generate_state(1)[0])


@dataclass
class MultiToOnePair:
    rainy: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    gt: np.ndarray  # (3, H, W)
    severities: tuple = SEVERITIES
    stem: str = ""

    def __post_init__(self):
        if self.rainy.ndim != 4 or self.rainy.shape[1:] != self.gt.shape:
            raise ValueError(f"pair {self.stem!r}: rainy {self.rainy.shape} vs gt {self.gt.shape}")
        if len(self.severities) != self.rainy.shape[0]:
            raise ValueError(f"pair {self.stem!r}: {len(self.severities)} tags for {self.rainy.shape[0]} images")

    @property
    def n(self) -> int:
        return self.rainy.shape[0]


def _gt_key(pair: MultiToOnePair) -> str:
    return hashlib.sha256(np.ascontiguousarray(pair.gt, dtype=np.float32).tobytes()).hexdigest()


@dataclass
class DatasetSplit:
    trainA: list = field(default_factory=list)
    trainB: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        check_disjoint(self.trainA, self.trainB)

    @property
    def train(self) -> list:
        return list(self.trainA) + list(self.trainB)


def check_disjoint(a, b) -> None:
    """No background may appear in both lists (by stem or by pixel content)."""
    stems = {p.stem for p in a} & {p.stem for p in b}
    if stems:
        raise ValueError(f"trainA and trainB share backgrounds: {sorted(stems)}")
    keys = {_gt_key(p) for p in a} & {_gt_key(p) for p in b}
    if keys:
        raise ValueError("trainA and trainB share a ground-truth image under different stems")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def make_background(seed: int, size: int | tuple = 32) -> np.ndarray:
    """Procedural clean image: a colour gradient plus random rectangles and discs."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(derive_seed(seed, "background"))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0, c1 = rng.uniform(0.1, 0.7, size=(2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * xx / max(w - 1, 1) + np.sin(ang) * yy / max(h - 1, 1) + 1) / 2
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(2, 6)):
        colour = rng.uniform(0.0, 0.8, size=3)[:, None, None]
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(h // 8 + 1, h // 2 + 2), x0 + rng.integers(w // 8 + 1, w // 2 + 2)
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(h, w) / 10, min(h, w) / 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img = np.where(mask[None], colour, img)
    return np.clip(img, 0, 1).astype(np.float32)


def line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Anti-aliased unit-peak line of ``length`` px; 90 degrees is vertical."""
    k = np.zeros((length, length))
    c = (length - 1) / 2
    t = np.linspace(-c, c, 8 * length)
    a = np.deg2rad(angle_deg)
    ys, xs = c - t * np.sin(a), c + t * np.cos(a)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (1, 0, fy * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < length) & (xi >= 0) & (xi < length)
        np.add.at(k, (yi[ok], xi[ok]), wgt[ok])
    return k / k.max()


def rain_layer(shape: tuple, severity: str, seed: int) -> np.ndarray:
    """Non-negative (H, W) streak layer, deterministic in (seed, severity)."""
    if severity not in RAIN_PARAMS:
        raise ValueError(f"unknown severity {severity!r}")
    prm = RAIN_PARAMS[severity]
    rng = np.random.default_rng(derive_seed(seed, severity))
    noise = rng.uniform(size=shape)
    drops = (noise >= prm["quantile"]).astype(np.float64)
    angle = rng.uniform(*ANGLE_RANGE)
    streaks = ndimage.convolve(drops, line_kernel(prm["length"], angle), mode="constant")
    return prm["gain"] * streaks


def generate_rain(gt: np.ndarray, severity: str, seed: int) -> np.ndarray:
    """Additive composite: ``clip(gt + R, 0, 1)`` with the same R on every channel."""
    gt = np.asarray(gt, dtype=np.float32)
    if gt.min() < 0 or gt.max() > 1:
        raise ValueError("ground truth must lie in [0, 1]")
    r = rain_layer(gt.shape[-2:], severity, seed)
    return np.clip(gt + r[None].astype(np.float32), 0, 1)


def make_pair(gt: np.ndarray, seed: int, stem: str = "") -> MultiToOnePair:
    rainy = np.stack([generate_rain(gt, sev, derive_seed(seed, i)) for i, sev in enumerate(SEVERITIES)])
    return MultiToOnePair(rainy.astype(np.float32), np.asarray(gt, dtype=np.float32), SEVERITIES, stem)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def synthetic_split(n_a: int, n_b: int, n_test: int, size: int = 32, seed: int = 0) -> DatasetSplit:
    """In-memory desk-scale split, quantized exactly as the on-disk form would be."""
    pairs = []
    for i in range(n_a + n_b + n_test):
        s = derive_seed(seed, i)
        gt = quantize(make_background(s, size))
        p = make_pair(gt, s, stem=f"img{i:04d}")
        pairs.append(MultiToOnePair(quantize(p.rainy), p.gt, p.severities, p.stem))
    return DatasetSplit(pairs[:n_a], pairs[n_a:n_a + n_b], pairs[n_a + n_b:])


# ---------------------------------------------------------------------------
# disk layout: root/gt/<stem>.png, root/rain/<stem>__<sev>.png, root/manifest.json
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def write_dataset(root, split: DatasetSplit) -> None:
    root = Path(root)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    (root / "rain").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name in ("trainA", "trainB", "test"):
        pairs = getattr(split, name)
        manifest[name] = [p.stem for p in pairs]
        for p in pairs:
            write_image(root / "gt" / f"{p.stem}.png", p.gt)
            for sev, img in zip(p.severities, p.rainy):
                write_image(root / "rain" / f"{p.stem}__{sev}.png", img)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root) -> DatasetSplit:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"{mpath}: no manifest")
    manifest = json.loads(mpath.read_text())
    for name in ("trainA", "trainB", "test"):
        if not isinstance(manifest.get(name), list):
            raise ValueError(f"manifest: '{name}' must be a list of stems")
    gt_stems = {p.stem for p in (root / "gt").glob("*.png")}
    groups: dict[str, dict[str, Path]] = {}
    for p in sorted((root / "rain").glob("*.png")):
        stem, sep, sev = p.stem.rpartition("__")
        if not sep or sev not in SEVERITIES:
            raise ValueError(f"rain file {p.name} does not follow <stem>__<severity>.png")
        if stem not in gt_stems:
            raise ValueError(f"rain file {p.name} has no ground truth gt/{stem}.png (orphan)")
        groups.setdefault(stem, {})[sev] = p
    listed = [s for name in ("trainA", "trainB", "test") for s in manifest[name]]
    if len(listed) != len(set(listed)):
        raise ValueError("manifest lists a stem more than once")
    unlisted = gt_stems - set(listed)
    if unlisted:
        raise ValueError(f"gt files not in manifest: {sorted(unlisted)}")
    split = {}
    for name in ("trainA", "trainB", "test"):
        pairs = []
        for stem in manifest[name]:
            if stem not in gt_stems:
                raise ValueError(f"manifest stem {stem!r} has no gt/{stem}.png")
            sevs = [s for s in SEVERITIES if s in groups.get(stem, {})]
            if not sevs:
                raise ValueError(f"ground truth {stem!r} has no rainy images")
            gt = read_image(root / "gt" / f"{stem}.png")
            rainy = [read_image(groups[stem][s]) for s in sevs]
            for s, r in zip(sevs, rainy):
                if r.shape != gt.shape:
                    raise ValueError(f"{stem}__{s}: shape {r.shape} differs from gt {gt.shape}")
            pairs.append(MultiToOnePair(np.stack(rainy), gt, tuple(sevs), stem))
        split[name] = pairs
    return DatasetSplit(**split)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(pair: MultiToOnePair, seed: int, patch: int | tuple, flip: bool = True,
            resize_instead_of_crop: bool = False) -> MultiToOnePair:
    """One crop (or resize) and one horizontal-flip coin shared by all N+1 images."""
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    h, w = pair.gt.shape[-2:]
    stack = np.concatenate([pair.rainy, pair.gt[None]], axis=0)
    rng = np.random.default_rng(derive_seed(seed, "augment"))
    if resize_instead_of_crop:
        t = torch.from_numpy(stack)
        stack = F.interpolate(t, size=(ph, pw), mode="bilinear", align_corners=False, antialias=True).numpy()
        stack = np.clip(stack, 0, 1)
    else:
        if ph > h or pw > w:
            raise ValueError(f"patch {(ph, pw)} larger than image {(h, w)}")
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        stack = stack[..., y0:y0 + ph, x0:x0 + pw]
    if flip and rng.random() < 0.5:
        stack = stack[..., ::-1]
    stack = np.ascontiguousarray(stack, dtype=np.float32)
    return MultiToOnePair(stack[:-1], stack[-1], pair.severities, pair.stem)
