"""Synthetic multi-scale segmentation corpus, preprocessing, overlap
metrics, and image/rate-field file I/O (binary PGM, CSV, corpus layout).

The generated images contain non-overlapping disks from two radius
populations (small and large) drawn as bright outlines on a noisy
background; labels mark the full disk interior. Filling a large interior
requires context well beyond a 7-layer classic receptive field, which is
what makes the scale-adaptive operators measurably better on this corpus.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor


@dataclass
class SegmentationSample:
    image: np.ndarray                 # (1,1,H,W) float32, preprocessed
    labels: np.ndarray                # (1,H,W) integer class per pixel
    meta: list = field(default_factory=list)  # [(cy, cx, radius), ...]
    raw: np.ndarray | None = None     # (H,W) float in [0,1], pre-normalization


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    num_train: int = 200
    num_test: int = 50
    small_radius: tuple = (2.0, 4.0)
    large_radius: tuple = (10.0, 16.0)
    small_per_image: tuple = (1, 3)
    large_per_image: tuple = (1, 1)
    background_level: float = 0.25
    foreground_level: float = 0.9
    outline_width: float = 2.0
    noise_sigma: float = 0.05
    seed: int = 0
    max_place_tries: int = 200

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("image dims must be >= 32")
        for lo, hi in (self.small_radius, self.large_radius):
            if lo <= 0 or hi < lo:
                raise ValueError("radius ranges must be positive and ordered")
        if self.small_radius[1] >= self.large_radius[0]:
            raise ValueError("small and large radius ranges must be disjoint")


def preprocess(raw: np.ndarray) -> np.ndarray:
    """Normalize to zero mean, unit variance. Errors on constant input."""
    raw = np.asarray(raw, dtype=np.float32)
    std = raw.std()
    if std == 0:
        raise ValueError("cannot normalize a constant image (zero variance)")
    return (raw - raw.mean()) / std


def _place_disks(rng, cfg):
    """Sample non-overlapping disk placements; raises after bounded retries."""
    disks = []
    counts = (
        (cfg.large_per_image, cfg.large_radius),
        (cfg.small_per_image, cfg.small_radius),
    )
    for (lo_n, hi_n), (lo_r, hi_r) in counts:
        n = int(rng.integers(lo_n, hi_n + 1))
        for _ in range(n):
            for attempt in range(cfg.max_place_tries):
                radius = float(rng.uniform(lo_r, hi_r))
                cy = float(rng.uniform(radius + 1, cfg.height - radius - 1))
                cx = float(rng.uniform(radius + 1, cfg.width - radius - 1))
                ok = all(
                    np.hypot(cy - oy, cx - ox) > radius + orad + 2.0
                    for oy, ox, orad in disks
                )
                if ok:
                    disks.append((cy, cx, radius))
                    break
            else:
                raise RuntimeError(
                    f"could not place a disk after {cfg.max_place_tries} tries"
                )
    return disks


def _render_sample(rng, cfg) -> SegmentationSample:
    h, w = cfg.height, cfg.width
    disks = _place_disks(rng, cfg)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    raw = np.full((h, w), cfg.background_level, dtype=np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    for cy, cx, radius in disks:
        dist = np.hypot(yy - cy, xx - cx)
        labels[dist <= radius] = 1
        ring = (dist <= radius) & (dist > radius - cfg.outline_width)
        raw[ring] = cfg.foreground_level
    raw = raw + rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    raw = np.clip(raw, 0.0, 1.0)
    image = preprocess(raw).reshape(1, 1, h, w)
    return SegmentationSample(image, labels.reshape(1, h, w), disks,
                              raw.astype(np.float32))


def generate_synth(cfg: SynthConfig):
    """Deterministically generate (train, test) sample lists from cfg.seed."""
    rng = tensor.make_rng(cfg.seed)
    train = [_render_sample(rng, cfg) for _ in range(cfg.num_train)]
    test = [_render_sample(rng, cfg) for _ in range(cfg.num_test)]
    return train, test


def _binary_counts(pred_mask, true_mask):
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(true_mask, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return int((p & t).sum()), int(p.sum()), int(t.sum())


def dice(pred_mask, true_mask) -> float:
    """2|P&T| / (|P|+|T|); 1.0 when both masks are empty."""
    inter, np_, nt = _binary_counts(pred_mask, true_mask)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def precision(pred_mask, true_mask) -> float:
    """|P&T| / |P|; 1.0 if both empty, 0.0 if only P is empty."""
    inter, np_, nt = _binary_counts(pred_mask, true_mask)
    if np_ == 0:
        return 1.0 if nt == 0 else 0.0
    return inter / np_


def recall(pred_mask, true_mask) -> float:
    """|P&T| / |T|; 1.0 if both empty, 0.0 if only T is empty."""
    inter, np_, nt = _binary_counts(pred_mask, true_mask)
    if nt == 0:
        return 1.0 if np_ == 0 else 0.0
    return inter / nt


# --- PGM (binary P5, 8- or 16-bit big-endian) ---------------------------


def write_pgm(path, values: np.ndarray, maxval: int = 65535) -> None:
    """Write a 2-D integer array as binary PGM (P5)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PGM payload must be 2-D, got shape {values.shape}")
    if not (0 < maxval < 65536):
        raise ValueError("maxval must be in [1, 65535]")
    if values.min() < 0 or values.max() > maxval:
        raise ValueError("PGM sample values out of range")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            f.write(values.astype(">u2").tobytes())
        else:
            f.write(values.astype("u1").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) into a 2-D uint array (uint8 or uint16)."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header tokens (magic, width, height, maxval) separated by whitespace,
    # with '#' comments running to end of line.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = h * w
    payload = data[pos:pos + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise ValueError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr.astype(dtype.newbyteorder("="))


# --- Rate field export / stats -------------------------------------------


def _fmt(v) -> str:
    # repr of a Python float is the shortest string that round-trips.
    return repr(float(v))


def export_rate_field(rates: np.ndarray, prefix) -> None:
    """Write <prefix>.csv (full-precision row-major floats), <prefix>.pgm
    (16-bit, min-max scaled) and <prefix>.scale.txt (the scaling used)."""
    prefix = str(prefix)
    vals = np.asarray(rates).reshape(rates.shape[-2], rates.shape[-1])
    with open(prefix + ".csv", "w") as f:
        for row in vals:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    lo = float(vals.min())
    hi = float(vals.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((vals - lo) / span * 65535).astype(np.uint16)
    write_pgm(prefix + ".pgm", scaled, maxval=65535)
    with open(prefix + ".scale.txt", "w") as f:
        f.write(f"min={_fmt(lo)} max={_fmt(hi)}\n")


def load_rate_field_csv(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    vals = np.array(rows, dtype=np.float64)
    return vals.reshape(1, 1, *vals.shape)


def rate_stats(rates, labels, meta, small_cutoff: float = 7.0) -> dict:
    """Mean learned rate over small-object, large-object and background
    pixels. Objects are split by their annotated radius at `small_cutoff`."""
    h, w = rates.shape[-2], rates.shape[-1]
    vals = np.asarray(rates).reshape(h, w)
    lab = np.asarray(labels).reshape(h, w)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    small = np.zeros((h, w), dtype=bool)
    large = np.zeros((h, w), dtype=bool)
    for cy, cx, radius in meta:
        mask = (np.hypot(yy - cy, xx - cx) <= radius) & (lab > 0)
        if radius <= small_cutoff:
            small |= mask
        else:
            large |= mask
    bg = lab == 0

    def mean_or_nan(mask):
        return float(vals[mask].mean()) if mask.any() else float("nan")

    return {
        "small": mean_or_nan(small),
        "large": mean_or_nan(large),
        "background": mean_or_nan(bg),
    }


# --- Corpus on disk --------------------------------------------------------


def write_samples(samples, directory) -> None:
    """Write img_XXXX.pgm (16-bit), lbl_XXXX.pgm (8-bit) pairs and meta.csv."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "meta.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "cy", "cx", "radius"])
        for i, s in enumerate(samples):
            if s.raw is None:
                raise ValueError("sample has no raw intensities to serialize")
            q = np.round(np.clip(s.raw, 0.0, 1.0) * 65535).astype(np.uint16)
            write_pgm(directory / f"img_{i:04d}.pgm", q, maxval=65535)
            write_pgm(directory / f"lbl_{i:04d}.pgm",
                      s.labels.reshape(q.shape).astype(np.uint8), maxval=255)
            for cy, cx, radius in s.meta:
                writer.writerow([i, _fmt(cy), _fmt(cx), _fmt(radius)])


def load_image_dir(path) -> list:
    """Load img_*.pgm / lbl_*.pgm pairs (plus meta.csv when present) as
    preprocessed samples. Errors name the offending file."""
    from pathlib import Path

    path = Path(path)
    imgs = sorted(path.glob("img_*.pgm"))
    if not imgs:
        raise ValueError(f"{path}: no img_*.pgm files found")

    meta_by_index = {}
    meta_path = path / "meta.csv"
    if meta_path.exists():
        with open(meta_path, newline="") as f:
            for row in csv.DictReader(f):
                meta_by_index.setdefault(int(row["index"]), []).append(
                    (float(row["cy"]), float(row["cx"]), float(row["radius"]))
                )

    samples = []
    for img_path in imgs:
        m = re.match(r"img_(\d+)\.pgm$", img_path.name)
        idx = int(m.group(1))
        lbl_path = img_path.with_name(f"lbl_{m.group(1)}.pgm")
        if not lbl_path.exists():
            raise ValueError(f"{img_path}: missing label file {lbl_path.name}")
        img = read_pgm(img_path)
        lbl = read_pgm(lbl_path)
        if img.shape != lbl.shape:
            raise ValueError(
                f"{lbl_path}: label dims {lbl.shape} do not match image "
                f"dims {img.shape}"
            )
        h, w = img.shape
        maxval = 65535 if img.dtype.itemsize == 2 else 255
        raw = img.astype(np.float32) / maxval
        samples.append(SegmentationSample(
            preprocess(raw).reshape(1, 1, h, w),
            lbl.astype(np.int64).reshape(1, h, w),
            meta_by_index.get(idx, []),
            raw,
        ))
    return samples
