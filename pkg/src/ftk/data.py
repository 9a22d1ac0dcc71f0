"""Directory-backed labeled image datasets, stratified splitting, seeded
mini-batching and the five-op augmentation pipeline.

Datasets are trees of binary PPM (P6) files, one subdirectory per class::

    root/
      Forest/0001.ppm
      River/0001.ppm

Per-sample augmentation randomness is a pure function of
``(base_seed, epoch, sample index)`` via the SplitMix64 stream in
:mod:`ftk.rng`, so any epoch of any run can be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ftk.rng import SplitMix64, stream_seed


class DatasetError(Exception):
    """Unusable dataset input: bad layout, unreadable or undecodable file."""


class PpmError(DatasetError):
    """Malformed PPM bytes."""


# ---------------------------------------------------------------------------
# PPM (P6) codec


def _parse_header(data: bytes) -> tuple[int, int, int]:
    """Validate the P6 header; returns (width, height, payload offset)."""
    if data[:2] != b"P6":
        raise PpmError(f"bad magic {data[:2]!r}, expected b'P6'")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError("truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise PpmError(f"non-numeric header field {data[start:pos]!r}") from None
    pos += 1  # the single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}, expected 255")
    return width, height, pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode binary PPM bytes to a channel-planar f32 image in [0, 1].

    Accepts the strict subset: magic "P6", ASCII width/height/maxval separated
    by whitespace, maxval 255, one whitespace byte, then 3*H*W raw RGB bytes.
    """
    width, height, pos = _parse_header(data)
    need = 3 * width * height
    if len(data) - pos != need:
        raise PpmError(f"truncated payload: expected {need} bytes, got {len(data) - pos}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return (raw.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode a [3,H,W] image with values in [0, 1] as binary PPM."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise PpmError(f"expected [3,H,W] image, got shape {img.shape}")
    _, h, w = img.shape
    bytes_hwc = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + bytes_hwc.transpose(1, 2, 0).tobytes()


def _validate_ppm_file(path: Path) -> None:
    """Cheap decodability check: header plus payload length, no float work."""
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"unreadable file {path}: {e}") from None
    try:
        width, height, pos = _parse_header(data)
        need = 3 * width * height
        if len(data) - pos != need:
            raise PpmError(f"payload length {len(data) - pos}, expected {need}")
    except PpmError as e:
        raise DatasetError(f"undecodable image {path}: {e}") from None


# ---------------------------------------------------------------------------
# Dataset and splits


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    items: list[tuple[str, int]]  # (path relative to root, class id)

    def __len__(self) -> int:
        return len(self.items)

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, cid in self.items:
            counts[cid] += 1
        return counts

    def load_image(self, index: int) -> np.ndarray:
        rel, _ = self.items[index]
        path = self.root / rel
        try:
            data = path.read_bytes()
        except OSError as e:
            raise DatasetError(f"unreadable file {path}: {e}") from None
        try:
            return decode_ppm(data)
        except PpmError as e:
            raise DatasetError(f"undecodable image {path}: {e}") from None


def load_dataset(root) -> Dataset:
    """Scan a class-per-directory PPM tree; classes map to ids in
    lexicographic order, items sort by path, and every file is validated."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")
    classes = [d.name for d in class_dirs]
    items: list[tuple[str, int]] = []
    for cid, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file())
        if not files:
            raise DatasetError(f"class directory {d} has no images")
        for f in files:
            _validate_ppm_file(f)
            items.append((f"{d.name}/{f.name}", cid))
    return Dataset(root=root, classes=classes, items=items)


@dataclass
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive train/val split; per class the items are shuffled
    by a seeded generator and cut at round(train_fraction * n)."""
    rng = np.random.default_rng(spec.seed)
    train_items: list[tuple[str, int]] = []
    val_items: list[tuple[str, int]] = []
    if spec.stratified:
        per_class: list[list[tuple[str, int]]] = [[] for _ in ds.classes]
        for item in ds.items:
            per_class[item[1]].append(item)
        for cid, bucket in enumerate(per_class):
            if len(bucket) < 2:
                raise DatasetError(
                    f"class {ds.classes[cid]!r} has {len(bucket)} item(s); stratified split needs >= 2"
                )
            order = rng.permutation(len(bucket))
            cut = _round_half_up(spec.train_fraction * len(bucket))
            train_items += [bucket[i] for i in order[:cut]]
            val_items += [bucket[i] for i in order[cut:]]
    else:
        order = rng.permutation(len(ds.items))
        cut = _round_half_up(spec.train_fraction * len(ds.items))
        train_items = [ds.items[i] for i in order[:cut]]
        val_items = [ds.items[i] for i in order[cut:]]
    train_items.sort()
    val_items.sort()
    train = Dataset(root=ds.root, classes=list(ds.classes), items=train_items)
    val = Dataset(root=ds.root, classes=list(ds.classes), items=val_items)
    return train, val


# ---------------------------------------------------------------------------
# Augmentation ops


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, :, ::-1])


def vflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1, :])


def rot90k(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate by k quarter turns in the image plane."""
    return np.ascontiguousarray(np.rot90(img, k % 4, axes=(1, 2)))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3*sigma), kernel normalized to sum
    1, reflect padding."""
    if sigma <= 0:
        return img.copy()
    r = math.ceil(3.0 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    kern = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    kern /= kern.sum()
    kern = kern.astype(img.dtype)
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img)
    for i in range(2 * r + 1):
        out += kern[i] * padded[:, :, i : i + w]
    padded = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for i in range(2 * r + 1):
        out += kern[i] * padded[:, i : i + h, :]
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the pixel-center convention (no corner alignment)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)[None, :, None]
    fx = (xs - x0).astype(img.dtype)[None, None, :]
    rows0 = img[:, y0, :]
    rows1 = img[:, y1, :]
    top = rows0[:, :, x0] * (1 - fx) + rows0[:, :, x1] * fx
    bot = rows1[:, :, x0] * (1 - fx) + rows1[:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel affine map (img - mean) / std."""
    mean = np.asarray(mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(std, dtype=img.dtype).reshape(3, 1, 1)
    if np.any(std <= 0):
        raise ValueError(f"std must be positive, got {std.reshape(-1).tolist()}")
    return (img - mean) / std


STOCHASTIC_OPS = ("gaussian_blur", "hflip", "vflip", "rot90")
DETERMINISTIC_OPS = ("resize", "normalize")


def validate_ops(ops) -> None:
    for op in ops:
        kind = op.get("kind")
        if kind in ("hflip", "vflip", "rot90"):
            p = op.get("p", 0.5)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{kind}: probability {p} outside [0, 1]")
        elif kind == "gaussian_blur":
            p = op.get("p", 0.3)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"gaussian_blur: probability {p} outside [0, 1]")
            lo, hi = op.get("sigma_min", 0.1), op.get("sigma_max", 1.0)
            if not 0 < lo <= hi:
                raise ValueError(f"gaussian_blur: bad sigma range [{lo}, {hi}]")
        elif kind == "resize":
            if op.get("height", 0) < 1 or op.get("width", 0) < 1:
                raise ValueError(f"resize: bad target {op}")
        elif kind == "normalize":
            if len(op.get("mean", ())) != 3 or len(op.get("std", ())) != 3:
                raise ValueError("normalize: mean and std must each have 3 entries")
            if any(s <= 0 for s in op["std"]):
                raise ValueError(f"normalize: std must be positive, got {op['std']}")
        else:
            raise ValueError(f"unknown augmentation op kind {kind!r}")


@dataclass
class AugmentPipeline:
    """Ordered op list plus the base seed of the per-sample randomness."""

    ops: list = field(default_factory=list)
    base_seed: int = 0

    def __post_init__(self):
        validate_ops(self.ops)

    def deterministic_only(self) -> "AugmentPipeline":
        """The resize/normalize tail used for validation and prediction."""
        return AugmentPipeline(
            ops=[op for op in self.ops if op["kind"] in DETERMINISTIC_OPS],
            base_seed=self.base_seed,
        )


def augment(img: np.ndarray, label: int, pipeline: AugmentPipeline, epoch: int, index: int) -> np.ndarray:
    """Apply the pipeline's ops in declared order; every op preserves the
    label, so ``label`` rides through untouched.

    Randomness comes from one SplitMix64 stream per (base_seed, epoch, index):
    each stochastic op draws its application coin and then its parameters, in
    op order, so the result is a pure function of those three values.
    """
    if not np.isfinite(img).all():
        raise ValueError("augment: non-finite input image")
    stream = SplitMix64(stream_seed(pipeline.base_seed, epoch, index))
    for op in pipeline.ops:
        kind = op["kind"]
        if kind == "gaussian_blur":
            if stream.next_float() < op.get("p", 0.3):
                sigma = stream.next_uniform(op.get("sigma_min", 0.1), op.get("sigma_max", 1.0))
                img = gaussian_blur(img, sigma)
        elif kind == "hflip":
            if stream.next_float() < op.get("p", 0.5):
                img = hflip(img)
        elif kind == "vflip":
            if stream.next_float() < op.get("p", 0.5):
                img = vflip(img)
        elif kind == "rot90":
            if stream.next_float() < op.get("p", 0.5):
                img = rot90k(img, stream.next_below(4))
        elif kind == "resize":
            img = resize_bilinear(img, op["height"], op["width"])
        elif kind == "normalize":
            img = normalize(img, op["mean"], op["std"])
        else:
            raise ValueError(f"unknown augmentation op kind {kind!r}")
    return img


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    images: np.ndarray  # [N,3,H,W] f32
    labels: np.ndarray  # [N] int64
    indices: np.ndarray  # dataset item indices, for provenance


def batches(ds: Dataset, batch_size: int = 64, shuffle_seed: int = 0, epoch: int = 0,
            pipeline: AugmentPipeline | None = None, shuffle: bool = True):
    """Stream mini-batches; a seeded per-epoch shuffle fixes the order and the
    last batch keeps the remainder (nothing is dropped)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds.items)
    if shuffle:
        order = np.random.default_rng([shuffle_seed & 0xFFFFFFFF, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        imgs = []
        labels = []
        for i in chunk:
            img = ds.load_image(int(i))
            if pipeline is not None:
                img = augment(img, ds.items[int(i)][1], pipeline, epoch, int(i))
            imgs.append(img.astype(np.float32, copy=False))
        labels = np.array([ds.items[int(i)][1] for i in chunk], dtype=np.int64)
        yield Batch(images=np.stack(imgs), labels=labels, indices=chunk.astype(np.int64))


# ---------------------------------------------------------------------------
# Split manifests


def write_manifest(path, rel_paths, classes, digest: str = "-") -> None:
    """One relative path per line, preceded by '#' header lines carrying the
    config digest and the class list."""
    lines = [f"# config_digest: {digest}", f"# classes: {','.join(classes)}"]
    lines += list(rel_paths)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[list[str], list[str], str]:
    """Returns (relative paths, classes, digest)."""
    digest = "-"
    classes: list[str] = []
    rel_paths: list[str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("# config_digest:"):
            digest = line.split(":", 1)[1].strip()
        elif line.startswith("# classes:"):
            classes = [c for c in line.split(":", 1)[1].strip().split(",") if c]
        elif not line.startswith("#"):
            rel_paths.append(line)
    return rel_paths, classes, digest


def dataset_from_manifest(root, manifest_path) -> Dataset:
    """Rebuild the exact sample list of a previous split."""
    rel_paths, classes, _ = read_manifest(manifest_path)
    root = Path(root)
    if not classes:
        classes = sorted({p.split("/", 1)[0] for p in rel_paths})
    ids = {c: i for i, c in enumerate(classes)}
    items = []
    for rel in rel_paths:
        cls = rel.split("/", 1)[0]
        if cls not in ids:
            raise DatasetError(f"manifest entry {rel!r} names unknown class {cls!r}")
        items.append((rel, ids[cls]))
    return Dataset(root=root, classes=classes, items=items)
