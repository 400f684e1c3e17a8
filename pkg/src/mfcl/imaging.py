"""Image I/O, hole masks, structure targets and training samples.

Images are float arrays of shape (H, W, 3) with values in [0, 1]; masks are
(H, W) float arrays holding exactly 0 (hole) or 1 (valid).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

log = logging.getLogger(__name__)

BUCKETS = {
    "10-20": (0.10, 0.20),
    "20-30": (0.20, 0.30),
    "30-40": (0.30, 0.40),
    "40-50": (0.40, 0.50),
}

IMAGE_SUFFIXES = (".ppm", ".png")


class PPMError(ValueError):
    """Malformed or truncated PPM data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# PPM / PNG


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError("unexpected end of header", pos)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a binary P6 PPM into an (H, W, 3) uint8 array."""
    if buf[:2] != b"P6":
        raise PPMError(f"bad magic {buf[:2]!r}, expected b'P6'", 0)
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"{label} is not a positive integer: {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PPMError(f"invalid dimensions {width}x{height}", pos)
    if maxval != 255:
        raise PPMError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError("missing whitespace after header", pos)
    pos += 1
    need = width * height * 3
    have = len(buf) - pos
    if have < need:
        raise PPMError(f"truncated pixel data: expected {need} bytes, found {have}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read a P6 PPM (or PNG when Pillow is installed) as floats in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage  # optional dependency

        with PILImage.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    else:
        pixels = decode_ppm(path.read_bytes())
    return pixels.astype(np.float64) / 255.0


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    pixels = to_uint8(image)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(pixels).save(path)
    else:
        path.write_bytes(encode_ppm(pixels))


def load_mask(path) -> np.ndarray:
    """Masks are stored as grey PPMs: white = valid, black = hole."""
    return (load_image(path).mean(axis=2) >= 0.5).astype(np.float64)


def save_mask(mask: np.ndarray, path) -> None:
    save_image(mask, path)


# ---------------------------------------------------------------------------
# resizing (data preparation only, not differentiable)


def _filter_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Triangle-filter resampling matrix, widened when downscaling to avoid aliasing."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.arange(n_in)
    wts = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centers[:, None]) / support)
    empty = wts.sum(axis=1) == 0
    if np.any(empty):
        nearest = np.clip(np.rint(centers[empty]).astype(int), 0, n_in - 1)
        wts[np.where(empty)[0], nearest] = 1.0
    return wts / wts.sum(axis=1, keepdims=True)


def resize_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    if image.shape[:2] == (h, w):
        return image.copy()
    rows = _filter_matrix(image.shape[0], h)
    cols = _filter_matrix(image.shape[1], w)
    out = np.einsum("ih,hwc,jw->ijc", rows, image, cols)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# masks


def hole_ratio(mask: np.ndarray) -> float:
    return float((mask == 0).sum()) / mask.size


def generate_center_mask(h: int, w: int) -> np.ndarray:
    """Centered hole of half the height and width (hole ratio 0.25)."""
    if h % 2 or w % 2:
        raise ValueError(f"center mask needs even dimensions, got {h}x{w}")
    mask = np.ones((h, w))
    top, left = (h - h // 2) // 2, (w - w // 2) // 2
    mask[top:top + h // 2, left:left + w // 2] = 0.0
    return mask


def parse_bucket(bucket) -> tuple[float, float]:
    key = str(bucket).replace("%", "").strip()
    if key not in BUCKETS:
        raise ValueError(f"unknown mask bucket {bucket!r}; expected one of {sorted(BUCKETS)}")
    return BUCKETS[key]


MAX_MASK_ATTEMPTS = 64


def generate_irregular_mask(h: int, w: int, bucket, seed: int) -> np.ndarray:
    """Random brush-stroke hole whose area ratio lies strictly inside ``bucket``.

    Each attempt draws 6-14 random walks of 40-120 steps with a disc brush of
    radius 4-10% of min(h, w). Dabs are stamped one at a time and drawing
    stops as soon as the hole ratio exceeds the bucket's lower bound; a single
    dab covers at most ~3% of the image, so it cannot jump over a 10% bucket.
    Attempts whose full stroke budget stays below the bucket are redrawn.
    """
    lo, hi = parse_bucket(bucket)
    rng = np.random.default_rng([seed, h, w, int(round(lo * 100))])
    side = min(h, w)
    total = h * w
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(MAX_MASK_ATTEMPTS):
        hole = np.zeros((h, w), dtype=bool)
        covered = 0
        for _ in range(int(rng.integers(6, 15))):
            y, x = rng.uniform(0, h), rng.uniform(0, w)
            angle = rng.uniform(0, 2 * math.pi)
            radius = rng.uniform(0.04, 0.10) * side
            for _ in range(int(rng.integers(40, 121))):
                angle += rng.normal(0.0, 0.6)
                step = radius * rng.uniform(0.5, 1.0)
                y = float(np.clip(y + step * math.sin(angle), 0, h - 1))
                x = float(np.clip(x + step * math.cos(angle), 0, w - 1))
                r = int(math.ceil(radius))
                y0, y1 = max(0, int(y) - r), min(h, int(y) + r + 2)
                x0, x1 = max(0, int(x) - r), min(w, int(x) + r + 2)
                disc = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2 <= radius * radius
                window = hole[y0:y1, x0:x1]
                covered += int((disc & ~window).sum())
                window |= disc
                ratio = covered / total
                if ratio > lo:
                    if ratio < hi:
                        return (~hole).astype(np.float64)
                    break
            else:
                continue
            break
    raise RuntimeError(
        f"could not draw a {lo:.0%}-{hi:.0%} mask for {h}x{w} in {MAX_MASK_ATTEMPTS} attempts")


def hole_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (top, bottom, left, right) bounds of the hole, half-open."""
    rows = np.where((mask == 0).any(axis=1))[0]
    cols = np.where((mask == 0).any(axis=0))[0]
    if rows.size == 0:
        raise ValueError("mask has no hole pixels")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


# ---------------------------------------------------------------------------
# structure target


def structure_smooth(image: np.ndarray, lam: float = 5.0, iters: int = 4,
                     sigma_e: float = 0.05) -> np.ndarray:
    """Edge-preserving smoothing by iteratively reweighted least squares.

    Each iteration solves ``(I + lam * L_w) u = image`` per channel, where
    ``L_w`` is the 4-neighbour graph Laplacian with edge weights
    ``exp(-|grad u| / sigma_e)`` measured on the channel-mean of the current
    estimate. Strong steps get near-zero weight and survive; low-amplitude
    texture is flattened.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    # horizontal then vertical edges
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    rhs = img.reshape(n, c)
    u = rhs.copy()
    eye = sp.identity(n, format="csr")
    for _ in range(iters):
        lum = u.mean(axis=1)
        wts = lam * np.exp(-np.abs(lum[ea] - lum[eb]) / sigma_e)
        adj = sp.coo_matrix((np.concatenate([wts, wts]),
                             (np.concatenate([ea, eb]), np.concatenate([eb, ea]))), shape=(n, n)).tocsr()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        system = (eye + sp.diags(deg) - adj).tocsc()
        u = spsolve(system, rhs)
        u = u.reshape(n, c)
    out = np.clip(u.reshape(h, w, c), 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# samples and dataset


@dataclass
class Sample:
    image: np.ndarray
    structure: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shapes = {self.image.shape[:2], self.structure.shape[:2], self.mask.shape}
        if len(shapes) != 1:
            raise ValueError(f"sample components disagree on size: {shapes}")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


class ImageFolder:
    """Images under ``<root>/images`` with optional precomputed ``<root>/structures``.

    Unreadable files are skipped with a warning. Structures missing on disk
    are computed once with :func:`structure_smooth` and cached in memory.
    """

    def __init__(self, root, size: int = 64, smooth: dict | None = None):
        root = Path(root)
        image_dir = root / "images" if (root / "images").is_dir() else root
        if not image_dir.is_dir():
            raise FileNotFoundError(f"no image directory at {image_dir}")
        self.root = root
        self.size = size
        self.smooth = smooth or {}
        self.paths: list[Path] = []
        self.images: list[np.ndarray] = []
        for p in list_images(image_dir):
            try:
                img = load_image(p)
            except (PPMError, OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", p, exc)
                continue
            self.paths.append(p)
            self.images.append(resize_image(img, size, size))
        if not self.images:
            raise ValueError(f"no decodable images in {image_dir}")
        self._structures: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.images)

    def structure(self, i: int) -> np.ndarray:
        if i not in self._structures:
            cached = self.root / "structures" / (self.paths[i].stem + ".ppm")
            if cached.exists():
                st = resize_image(load_image(cached), self.size, self.size)
            else:
                st = structure_smooth(self.images[i], **self.smooth)
            self._structures[i] = st
        return self._structures[i]


class MaskSource:
    """Deterministic mask lookup keyed by a global sample counter.

    ``mode`` is ``"center"``, a bucket name such as ``"30-40"``, or ``"all"``
    (irregular masks drawn from every bucket in turn).
    """

    def __init__(self, mode: str, size: int, seed: int):
        self.mode = mode
        self.size = size
        self.seed = seed
        if mode not in ("center", "all"):
            parse_bucket(mode)

    def __call__(self, counter: int) -> np.ndarray:
        if self.mode == "center":
            return generate_center_mask(self.size, self.size)
        names = sorted(BUCKETS) if self.mode == "all" else [self.mode]
        bucket = names[counter % len(names)]
        return generate_irregular_mask(self.size, self.size, bucket, self.seed * 1_000_003 + counter)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def batch_indices(n: int, batch: int, seed: int, step: int) -> tuple[np.ndarray, int]:
    """Image indices for global batch ``step`` and the global sample counter of its first item."""
    per = batches_per_epoch(n, batch)
    epoch, b = divmod(step, per)
    order = epoch_order(n, seed, epoch)
    idx = order[b * batch:(b + 1) * batch]
    return idx, epoch * n + b * batch


def make_batch(folder: ImageFolder, masks: MaskSource, indices, counter: int) -> list[Sample]:
    return [Sample(folder.images[i], folder.structure(i), masks(counter + k))
            for k, i in enumerate(indices)]


def dataset_iter(directory, batch: int, shuffle_seed: int, size: int = 64,
                 mask_mode: str = "all", epochs: int = 1) -> Iterator[list[Sample]]:
    """Yield lists of :class:`Sample` in a seed-determined shuffled order."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    folder = ImageFolder(directory, size)
    masks = MaskSource(mask_mode, size, shuffle_seed)
    per = batches_per_epoch(len(folder), batch)
    for step in range(per * epochs):
        idx, counter = batch_indices(len(folder), batch, shuffle_seed, step)
        yield make_batch(folder, masks, idx, counter)


def stack_batch(samples: list[Sample], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Samples -> (images N3HW, structures N3HW, masks N1HW)."""
    img = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(dtype)
    st = np.stack([s.structure.transpose(2, 0, 1) for s in samples]).astype(dtype)
    mask = np.stack([s.mask[None] for s in samples]).astype(dtype)
    return img, st, mask


# ---------------------------------------------------------------------------
# dataset preparation


def prepare_dataset(src, out, size: int = 64, masks_per_bucket: int = 16, seed: int = 0,
                    smooth: dict | None = None) -> dict:
    """Resize raw images, compute structure targets, generate masks and a pairing manifest.

    Layout written under ``out``: ``images/*.ppm``, ``structures/*.ppm``,
    ``masks/<bucket>/*.ppm`` and ``manifest.json``.
    """
    src, out = Path(src), Path(out)
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    raw = list_images(src / "images" if (src / "images").is_dir() else src)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "structures").mkdir(parents=True, exist_ok=True)
    names = []
    for p in raw:
        try:
            img = load_image(p)
        except (PPMError, OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        img = resize_image(img, size, size)
        save_image(img, out / "images" / f"{p.stem}.ppm")
        # structure from the quantized image so it matches what loaders will see
        img = load_image(out / "images" / f"{p.stem}.ppm")
        save_image(structure_smooth(img, **(smooth or {})), out / "structures" / f"{p.stem}.ppm")
        names.append(f"{p.stem}.ppm")
    if not names:
        raise ValueError(f"no decodable images in {src}")

    rng = np.random.default_rng(seed)
    pairs: dict[str, list[list[str]]] = {}
    for bucket in sorted(BUCKETS):
        mdir = out / "masks" / bucket
        mdir.mkdir(parents=True, exist_ok=True)
        files = []
        for k in range(masks_per_bucket):
            m = generate_irregular_mask(size, size, bucket, seed * 7919 + k)
            fname = f"mask_{k:04d}.ppm"
            save_mask(m, mdir / fname)
            files.append(f"masks/{bucket}/{fname}")
        choice = rng.integers(len(files), size=len(names))
        pairs[bucket] = [[f"images/{n}", files[c]] for n, c in zip(names, choice)]
    manifest = {"size": size, "seed": seed, "images": [f"images/{n}" for n in names], "pairs": pairs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
