"""Dataset ingestion (IDX, CIFAR-10 binary), stochastic augmentation and batching.

Augmentations operate on torch tensors of shape ``[C, H, W]`` or batches
``[B, C, H, W]``; batched calls draw independent parameters per image from
the supplied ``torch.Generator`` in a fixed order, so identical seeds give
identical outputs.
"""

import gzip
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import DataFormatError

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
CIFAR_RECORD = 1 + 3 * 32 * 32
LUMA = (0.299, 0.587, 0.114)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise ValueError(f"images must be a non-empty [N, C, H, W] array, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.images.shape[0]} images but labels have shape {self.labels.shape}"
            )
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, n):
        """The first ``n`` examples."""
        return Dataset(self.images[:n], self.labels[:n], self.name, self.num_classes)

    def split_holdout(self, fraction=0.1):
        """Split off the last ``fraction`` of the examples as a held-out set."""
        n_hold = int(round(len(self) * fraction))
        if not 0 < n_hold < len(self):
            raise ValueError(f"holdout fraction {fraction} leaves an empty split")
        cut = len(self) - n_hold
        train = Dataset(self.images[:cut], self.labels[:cut], self.name, self.num_classes)
        held = Dataset(self.images[cut:], self.labels[cut:], self.name, self.num_classes)
        return train, held


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def parse_idx(buf):
    """Decode an in-memory IDX file into a numpy array (native byte order)."""
    if len(buf) < 4:
        raise DataFormatError("truncated IDX header", offset=len(buf))
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0:
        raise DataFormatError(f"bad IDX magic 0x{buf[:4].hex()}", offset=0)
    if code not in IDX_DTYPES:
        raise DataFormatError(f"unknown IDX element type 0x{code:02x}", offset=2)
    if ndim == 0:
        raise DataFormatError("IDX file declares zero dimensions", offset=3)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError("truncated IDX dimension block", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = IDX_DTYPES[code]
    expected = header + math.prod(dims) * dtype.itemsize
    if len(buf) < expected:
        raise DataFormatError(
            f"IDX data truncated: dims {dims} need {expected} bytes, file has {len(buf)}",
            offset=len(buf),
        )
    if len(buf) > expected:
        raise DataFormatError(
            f"IDX file has {len(buf) - expected} trailing bytes after dims {dims}",
            offset=expected,
        )
    data = np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)
    return data.astype(dtype.newbyteorder("="))


def read_idx(path):
    with _open(path) as f:
        return parse_idx(f.read())


def write_idx(path, array):
    """Write ``array`` in IDX layout (big-endian header and data)."""
    array = np.asarray(array)
    for code, dtype in IDX_DTYPES.items():
        if (dtype.kind, dtype.itemsize) == (array.dtype.kind, array.dtype.itemsize):
            break
    else:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + np.ascontiguousarray(array, dtype=dtype).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def _guess_labels_path(path):
    base = os.path.basename(path)
    for img, lab in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if img in base:
            candidate = os.path.join(os.path.dirname(path), base.replace(img, lab, 1))
            if os.path.exists(candidate):
                return candidate
    raise FileNotFoundError(f"cannot infer the label file for {path}; pass labels_path")


def _load_idx_dataset(path, labels_path, transpose, name):
    raw = read_idx(path)
    if raw.ndim != 3:
        raise DataFormatError(f"IDX image file must be 3-D [N, H, W], got {raw.ndim}-D", offset=3)
    labels = read_idx(labels_path or _guess_labels_path(path))
    if labels.ndim != 1:
        raise DataFormatError(f"IDX label file must be 1-D, got {labels.ndim}-D", offset=3)
    if labels.shape[0] != raw.shape[0]:
        raise DataFormatError(
            f"{raw.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    if transpose is None:
        transpose = "emnist" in os.path.basename(path).lower()
    if transpose:
        raw = raw.transpose(0, 2, 1)
    scale = 255.0 if raw.dtype == np.uint8 else 1.0
    images = (raw.astype(np.float32) / scale)[:, None]
    return Dataset(images, labels.astype(np.int64), name)


def _read_cifar_file(path):
    with _open(path) as f:
        buf = f.read()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(buf)} is not a positive multiple of the "
            f"{CIFAR_RECORD}-byte record",
            offset=whole * CIFAR_RECORD,
        )
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: label {labels[bad]} out of range", offset=bad * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar_dataset(path, name):
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.startswith("data_batch")
        )
        if not files:
            raise FileNotFoundError(f"no data_batch_*.bin files in {path}")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, name, num_classes=10)


def load_dataset(path, format="idx", labels_path=None, transpose=None, name=None):
    """Load a dataset with intensities scaled to [0, 1].

    ``format`` is ``"idx"`` (an image file, labels found next to it or given
    by ``labels_path``) or ``"cifar10-bin"`` (a batch file or a directory of
    ``data_batch_*.bin``). EMNIST files are transposed to upright orientation
    unless ``transpose`` says otherwise.
    """
    path = os.fspath(path)
    name = name or os.path.basename(path.rstrip(os.sep))
    if format == "idx":
        return _load_idx_dataset(path, labels_path, transpose, name)
    if format == "cifar10-bin":
        return _load_cifar_dataset(path, name)
    raise ValueError(f"unknown dataset format {format!r}")


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValueError(f"invalid crop_ratio {self.crop_ratio}")
        for name in ("flip_p", "jitter_p", "grayscale_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be a probability, got {p}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} strength must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue strength must be <= 0.5")

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0,
                   jitter_p=0.0, grayscale_p=0.0)

    @property
    def strengths(self):
        return (self.brightness, self.contrast, self.saturation, self.hue)


def _as_batch(img):
    img = torch.as_tensor(img)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ValueError(f"expected [C, H, W] or [B, C, H, W], got shape {list(img.shape)}")
    return img, False


def _unbatch(out, single):
    return out[0] if single else out


def _uniform(n, lo, hi, rng, dtype=torch.float64):
    return lo + (hi - lo) * torch.rand(n, generator=rng, dtype=dtype)


def resized_crop(img, top, left, height, width):
    """Crop ``[top, top+height) x [left, left+width)`` and resize bilinearly back.

    Sampling uses pixel centres: output row i reads source row
    ``top + (i + 0.5) * height / H - 0.5``, clamped to the crop window.
    Box arguments may be scalars or per-image tensors.
    """
    batch, single = _as_batch(img)
    B, C, H, W = batch.shape
    box = [torch.as_tensor(v, dtype=torch.float64).expand(B) for v in (top, left, height, width)]
    top, left, height, width = box

    def coords(start, extent, n):
        pos = start[:, None] + (torch.arange(n, dtype=torch.float64) + 0.5) * extent[:, None] / n - 0.5
        pos = torch.minimum(torch.maximum(pos, start[:, None]), (start + extent - 1)[:, None])
        lo = pos.floor().clamp(0, n - 1)
        hi = (lo + 1).clamp(max=n - 1)
        return lo.long(), hi.long(), (pos - lo).to(batch.dtype)

    y0, y1, wy = coords(top, height, H)
    x0, x1, wx = coords(left, width, W)
    b = torch.arange(B)[:, None, None]
    src = batch.permute(0, 2, 3, 1)  # B, H, W, C

    def at(ys, xs):
        return src[b, ys[:, :, None], xs[:, None, :]]

    wy = wy[:, :, None, None]
    wx = wx[:, None, :, None]
    top_row = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
    bottom_row = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
    out = (top_row * (1 - wy) + bottom_row * wy).permute(0, 3, 1, 2)
    return _unbatch(out.clamp(0.0, 1.0).contiguous(), single)


def sample_crop_boxes(n, height, width, scale_range, ratio_range, rng, attempts=10):
    """Per-image crop boxes ``(top, left, h, w)`` with area fraction in ``scale_range``
    and aspect ratio w/h in ``ratio_range``; falls back to the full image."""
    area = height * width * _uniform((n, attempts), *scale_range, rng)
    log_ratio = _uniform((n, attempts), math.log(ratio_range[0]), math.log(ratio_range[1]), rng)
    ratio = torch.exp(log_ratio)
    w = torch.round(torch.sqrt(area * ratio))
    h = torch.round(torch.sqrt(area / ratio))
    ok = (w >= 1) & (w <= width) & (h >= 1) & (h <= height)
    first = torch.argmax(ok.to(torch.int8), dim=1)
    found = ok.any(dim=1)
    rows = torch.arange(n)
    h = torch.where(found, h[rows, first], torch.full((n,), float(height), dtype=torch.float64))
    w = torch.where(found, w[rows, first], torch.full((n,), float(width), dtype=torch.float64))
    u = torch.rand((n, 2), generator=rng, dtype=torch.float64)
    top = torch.floor(u[:, 0] * (height - h + 1)).clamp(max=height - h)
    left = torch.floor(u[:, 1] * (width - w + 1)).clamp(max=width - w)
    return top, left, h, w


def random_resized_crop(img, scale_range, rng, ratio_range=(3 / 4, 4 / 3)):
    batch, single = _as_batch(img)
    B, _, H, W = batch.shape
    if H < 2 or W < 2:
        return img
    boxes = sample_crop_boxes(B, H, W, scale_range, ratio_range, rng)
    return _unbatch(resized_crop(batch, *boxes), single)


def horizontal_flip(img, p, rng):
    """Reverse the columns of each image with probability ``p``."""
    batch, single = _as_batch(img)
    flip = torch.rand(batch.shape[0], generator=rng, dtype=torch.float64) < p
    out = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
    return _unbatch(out, single)


def to_grayscale(img):
    """Replace all channels by luminance; single-channel input is returned as is."""
    batch, single = _as_batch(img)
    if batch.shape[1] != 3:
        return img
    r, g, b = batch.unbind(1)
    lum = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    return _unbatch(lum[:, None].expand_as(batch).contiguous(), single)


def _luminance(batch):
    if batch.shape[1] == 3:
        return to_grayscale(batch)[:, :1]
    return batch


def _per_image(factor, batch):
    return torch.as_tensor(factor, dtype=batch.dtype).reshape(-1, 1, 1, 1)


def adjust_brightness(img, factor):
    batch, single = _as_batch(img)
    return _unbatch((batch * _per_image(factor, batch)).clamp(0.0, 1.0), single)


def adjust_contrast(img, factor):
    """out = mean + f * (in - mean), mean being the image's mean luminance."""
    batch, single = _as_batch(img)
    mean = _luminance(batch).mean(dim=(1, 2, 3), keepdim=True)
    f = _per_image(factor, batch)
    return _unbatch((mean + f * (batch - mean)).clamp(0.0, 1.0), single)


def adjust_saturation(img, factor):
    batch, single = _as_batch(img)
    if batch.shape[1] != 3:
        return img
    gray = _luminance(batch)
    f = _per_image(factor, batch)
    return _unbatch((gray + f * (batch - gray)).clamp(0.0, 1.0), single)


def _rgb_to_hsv(rgb):
    r, g, b = rgb.unbind(1)
    maxc = rgb.amax(dim=1)
    minc = rgb.amin(dim=1)
    span = maxc - minc
    flat = span == 0
    s = span / torch.where(flat, torch.ones_like(maxc), maxc)
    div = torch.where(flat, torch.ones_like(span), span)
    rc, gc, bc = (maxc - r) / div, (maxc - g) / div, (maxc - b) / div
    hr = (maxc == r) * (bc - gc)
    hg = ((maxc == g) & (maxc != r)) * (2.0 + rc - bc)
    hb = ((maxc != g) & (maxc != r)) * (4.0 + gc - rc)
    h = torch.fmod((hr + hg + hb) / 6.0 + 1.0, 1.0)
    return h, s, maxc


def _hsv_to_rgb(h, s, v):
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.long() % 6
    p = (v * (1.0 - s)).clamp(0.0, 1.0)
    q = (v * (1.0 - s * f)).clamp(0.0, 1.0)
    t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0)
    table = torch.stack([
        torch.stack([v, q, p, p, t, v], dim=1),
        torch.stack([t, v, v, q, p, p], dim=1),
        torch.stack([p, p, t, v, v, q], dim=1),
    ], dim=1)  # B, 3, 6, H, W
    index = i[:, None, None].expand(-1, 3, 1, -1, -1)
    return table.gather(2, index).squeeze(2)


def adjust_hue(img, shift):
    """Rotate hue by ``shift`` (fraction of a full turn, in [-0.5, 0.5])."""
    batch, single = _as_batch(img)
    if batch.shape[1] != 3:
        return img
    h, s, v = _rgb_to_hsv(batch)
    h = torch.remainder(h + torch.as_tensor(shift, dtype=batch.dtype).reshape(-1, 1, 1), 1.0)
    return _unbatch(_hsv_to_rgb(h, s, v).clamp(0.0, 1.0), single)


_JITTER_OPS = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def color_jitter(img, p, strengths, rng):
    """With probability ``p`` apply brightness, contrast, saturation and hue
    perturbations in a random per-image order.

    ``strengths`` is ``(brightness, contrast, saturation, hue)``; the first
    three draw factors uniformly from ``[1 - s, 1 + s]``, hue draws a shift
    from ``[-hue, hue]``. Saturation and hue leave 1-channel images alone.
    """
    batch, single = _as_batch(img)
    B = batch.shape[0]
    sb, sc, ss, sh = strengths
    apply = torch.rand(B, generator=rng, dtype=torch.float64) < p
    factors = (
        _uniform(B, max(0.0, 1 - sb), 1 + sb, rng),
        _uniform(B, max(0.0, 1 - sc), 1 + sc, rng),
        _uniform(B, max(0.0, 1 - ss), 1 + ss, rng),
        _uniform(B, -sh, sh, rng),
    )
    order = torch.argsort(torch.rand((B, 4), generator=rng, dtype=torch.float64), dim=1)
    out = batch.clone()
    for step in range(4):
        for op_index, op in enumerate(_JITTER_OPS):
            sel = apply & (order[:, step] == op_index)
            if sel.any():
                out[sel] = op(out[sel], factors[op_index][sel])
    return _unbatch(out, single)


def random_grayscale(img, p, rng):
    batch, single = _as_batch(img)
    pick = torch.rand(batch.shape[0], generator=rng, dtype=torch.float64) < p
    if batch.shape[1] != 3:
        return img
    out = torch.where(pick[:, None, None, None], to_grayscale(batch), batch)
    return _unbatch(out, single)


def augment(images, spec, rng):
    """Crop, flip, colour jitter, grayscale, in that order."""
    out = random_resized_crop(images, spec.crop_scale, rng, spec.crop_ratio)
    out = horizontal_flip(out, spec.flip_p, rng)
    out = color_jitter(out, spec.jitter_p, spec.strengths, rng)
    return random_grayscale(out, spec.grayscale_p, rng)


def two_views(x, spec, rng, key_rng=None):
    """Two independent augmentations of the same batch, row-aligned.

    The key view draws from ``key_rng`` when given, so the query stream is
    unaffected by whether a key view is produced at all.
    """
    xq = augment(x, spec, rng)
    xk = augment(x, spec, key_rng if key_rng is not None else rng)
    return xq, xk


def iterate_batches(n, batch_size, rng, shuffle=True, min_batch=2):
    """Yield index tensors covering a permutation of ``range(n)``.

    A trailing batch smaller than ``min_batch`` is dropped.
    """
    order = torch.randperm(n, generator=rng) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.numel() < min_batch:
            return
        yield idx

