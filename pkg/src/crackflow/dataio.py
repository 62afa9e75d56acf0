"""Image and dataset plumbing: PGM files, manifests, preprocessing,
augmentation, noise injection, and the dense true-flow sidecar format.

Images are 8-bit grayscale throughout. Binary PGM (P5) is the native
format; PNG is accepted read-only. A manifest is line-oriented text,
one frame pair per line:

    sequence_id, frame_index, ref_path, def_path, gt_path|-, timestamp_s, mm_per_px

with '#'-prefixed header lines carrying the split tag and per-sequence
frame rates. Paths are stored relative to the manifest file.

The flow sidecar is raw little-endian float32: an 8-byte header (width
u32, height u32) followed by the u-plane then the v-plane.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dic import CrackEdgeMap
from .errors import DataError, FormatError

# ----------------------------------------------------------------------
# image files


def save_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM wants a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header fields {tokens}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM pixel data "
                          f"({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def load_image(path) -> np.ndarray:
    """Load PGM natively; anything else goes through Pillow, read-only."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    if path.suffix.lower() == ".pgm":
        return load_pgm(path)
    from PIL import Image  # optional read path; imported only when needed

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_flow(path, u: np.ndarray, v: np.ndarray) -> None:
    u = np.ascontiguousarray(u, dtype="<f4")
    v = np.ascontiguousarray(v, dtype="<f4")
    if u.ndim != 2 or u.shape != v.shape:
        raise ValueError(f"flow planes must be matching 2-D arrays, "
                         f"got {u.shape} and {v.shape}")
    h, w = u.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(u.tobytes())
        fh.write(v.tobytes())


def load_flow(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise FormatError(f"{path}: flow file shorter than its header")
    w, h = struct.unpack("<II", buf[:8])
    need = 8 + 2 * 4 * w * h
    if len(buf) != need:
        raise FormatError(f"{path}: flow payload is {len(buf) - 8} bytes, "
                          f"expected {need - 8} for {w}x{h}")
    plane = w * h
    u = np.frombuffer(buf, dtype="<f4", count=plane, offset=8).reshape(h, w)
    v = np.frombuffer(buf, dtype="<f4", count=plane, offset=8 + 4 * plane).reshape(h, w)
    return u.copy(), v.copy()


# ----------------------------------------------------------------------
# frame pairs and manifests


@dataclass
class FramePair:
    """One reference/deformed image pair with optional ground truth."""

    reference: np.ndarray
    deformed: np.ndarray
    gt: CrackEdgeMap | None = None
    timestamp: float = 0.0
    mm_per_px: float = 0.05

    def __post_init__(self):
        if self.reference.shape != self.deformed.shape:
            raise ValueError(f"image shapes differ: {self.reference.shape} "
                             f"vs {self.deformed.shape}")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")


@dataclass
class ManifestEntry:
    sequence_id: str
    frame_index: int
    ref_path: str
    def_path: str
    gt_path: str | None
    timestamp_s: float
    mm_per_px: float


@dataclass
class DatasetManifest:
    entries: list
    split: str | None = None
    fps: dict = field(default_factory=dict)

    def __post_init__(self):
        last = {}
        for e in self.entries:
            prev = last.get(e.sequence_id)
            if prev is not None and e.frame_index <= prev:
                raise DataError(f"sequence {e.sequence_id}: frame indices not "
                                f"increasing at {e.frame_index}")
            last[e.sequence_id] = e.frame_index


def save_manifest(path, manifest: DatasetManifest) -> None:
    lines = []
    if manifest.split is not None:
        lines.append(f"# split={manifest.split}")
    for seq in sorted(manifest.fps):
        lines.append(f"# fps:{seq}={manifest.fps[seq]!r}")
    for e in manifest.entries:
        gt = e.gt_path if e.gt_path is not None else "-"
        lines.append(f"{e.sequence_id}, {e.frame_index}, {e.ref_path}, "
                     f"{e.def_path}, {gt}, {e.timestamp_s!r}, {e.mm_per_px!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    split = None
    fps = {}
    entries = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("split="):
                split = body[len("split="):]
            elif body.startswith("fps:"):
                seq, _, rate = body[len("fps:"):].partition("=")
                fps[seq] = float(rate)
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 7:
            raise FormatError(f"{path}: manifest line needs 7 fields, "
                              f"got {len(parts)}: {raw!r}")
        entries.append(ManifestEntry(
            sequence_id=parts[0], frame_index=int(parts[1]),
            ref_path=parts[2], def_path=parts[3],
            gt_path=None if parts[4] == "-" else parts[4],
            timestamp_s=float(parts[5]), mm_per_px=float(parts[6])))
    manifest = DatasetManifest(entries=entries, split=split, fps=fps)
    if check_files:
        for e in entries:
            for rel in (e.ref_path, e.def_path, e.gt_path):
                if rel is not None and not (path.parent / rel).exists():
                    raise DataError(f"manifest {path} references missing "
                                    f"file: {path.parent / rel}")
    return manifest


def load_pair(manifest_path, entry: ManifestEntry) -> FramePair:
    base = Path(manifest_path).parent
    gt = None
    if entry.gt_path is not None:
        raw = load_image(base / entry.gt_path)
        if not np.all((raw == 0) | (raw == 255)):
            raise DataError(f"{base / entry.gt_path}: ground truth must be "
                            f"binary 0/255")
        gt = CrackEdgeMap((raw // 255).astype(np.uint8), mm_per_px=entry.mm_per_px)
    return FramePair(reference=load_image(base / entry.ref_path),
                     deformed=load_image(base / entry.def_path),
                     gt=gt, timestamp=entry.timestamp_s,
                     mm_per_px=entry.mm_per_px)


def split_manifest(manifest: DatasetManifest, fractions, seed: int):
    """Seeded random split at the frame-pair level.

    Subset sizes are round(f * N) with the last subset absorbing the
    remainder; entries keep their original (time) order inside each
    subset.
    """
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, "
                         f"got {fractions}")
    n = len(manifest.entries)
    counts = [int(round(f * n)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        raise ValueError("rounded split sizes exceed the dataset")
    perm = np.random.default_rng(seed).permutation(n)
    tags = {2: ("train", "val"), 3: ("train", "val", "test")}.get(
        len(fractions), tuple(f"part{i}" for i in range(len(fractions))))
    out = []
    start = 0
    for tag, count in zip(tags, counts):
        picked = sorted(perm[start : start + count])
        out.append(DatasetManifest(
            entries=[manifest.entries[i] for i in picked],
            split=tag, fps=dict(manifest.fps)))
        start += count
    return out


# ----------------------------------------------------------------------
# preprocessing, augmentation, noise


def preprocess(img: np.ndarray, target: int = 1024) -> np.ndarray:
    """Min-pool by the largest integer factor keeping both dims >= target,
    then center-crop to target x target."""
    h, w = img.shape
    k = min(h // target, w // target)
    if k < 1:
        raise DataError(f"image {h}x{w} smaller than target {target}")
    pooled = img[: (h // k) * k, : (w // k) * k]
    pooled = pooled.reshape(h // k, k, w // k, k).min(axis=(1, 3))
    ph, pw = pooled.shape
    y0, x0 = (ph - target) // 2, (pw - target) // 2
    return pooled[y0 : y0 + target, x0 : x0 + target]


@dataclass
class AugmentationConfig:
    """Photometric and flip augmentation ranges (applied to both images)."""

    flip_p: float = 0.5
    factor_range: tuple = (0.95, 1.05)  # brightness, contrast, saturation
    hue_range: tuple = (-0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.factor_range
        if not (0.9 <= lo <= hi <= 1.1):
            raise ValueError("factor_range must sit inside [0.9, 1.1]")
        hlo, hhi = self.hue_range
        if not (-0.1 <= hlo <= hhi <= 0.1):
            raise ValueError("hue_range must sit inside [-0.1, 0.1]")
        if not (0 <= self.flip_p <= 1):
            raise ValueError("flip_p must be a probability")


def _photometric(img: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    x = img.astype(np.float64) * brightness
    x = (x - 127.5) * contrast + 127.5
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def augment(pair: FramePair, cfg: AugmentationConfig,
            rng: np.random.Generator | None = None) -> FramePair:
    """One sampled transform set, applied identically to both images.

    Draw order is fixed: flip, brightness, contrast, saturation, hue.
    Saturation and hue are sampled for stream stability but have no
    effect on single-channel images. A horizontal flip mirrors the
    ground truth; photometric changes leave it untouched.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    flip = rng.random() < cfg.flip_p
    lo, hi = cfg.factor_range
    brightness = rng.uniform(lo, hi)
    contrast = rng.uniform(lo, hi)
    rng.uniform(lo, hi)  # saturation: identity on grayscale
    rng.uniform(*cfg.hue_range)  # hue: identity on grayscale
    ref, de = pair.reference, pair.deformed
    gt = pair.gt
    if flip:
        ref, de = ref[:, ::-1], de[:, ::-1]
        if gt is not None:
            gt = CrackEdgeMap(gt.data[:, ::-1], mm_per_px=gt.mm_per_px)
    ref = _photometric(ref, brightness, contrast)
    de = _photometric(de, brightness, contrast)
    return replace(pair, reference=ref, deformed=de, gt=gt)


def inject_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise, clamp to [0, 255]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(np.round(noisy), 0, 255).astype(np.uint8)
