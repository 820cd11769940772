"""Dataset ingestion and synthesis.

Covers the standard big-endian IDX container used by the MNIST distribution,
the paired image/label loader, and a fast synthetic two-modality dataset
(oriented bar images paired with angle-encoding vectors) used for property
tests and desk-scale training runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

__all__ = [
    "IdxTensor",
    "IdxParseError",
    "MultimodalDataset",
    "parse_idx",
    "serialize_idx",
    "load_idx_file",
    "load_mnist_pair",
    "make_synthetic_bars",
    "render_bar",
    "batch_iter",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxParseError(ValueError):
    pass


@dataclass
class IdxTensor:
    magic: int
    dims: tuple
    payload: np.ndarray  # uint8, shaped per dims


@dataclass
class MultimodalDataset:
    """Index-aligned per-modality arrays, each of shape (N, data_dim)."""

    modalities: dict[str, np.ndarray]
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return next(iter(self.modalities.values())).shape[0]

    def names(self) -> list[str]:
        return list(self.modalities)

    def subset(self, indices) -> "MultimodalDataset":
        return MultimodalDataset(
            {k: v[indices] for k, v in self.modalities.items()},
            split=self.split, meta=dict(self.meta),
        )


def parse_idx(raw: bytes) -> IdxTensor:
    """Parse one IDX container (big-endian header, unsigned-byte payload)."""
    if len(raw) < 4:
        raise IdxParseError("truncated header at byte 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0:
        raise IdxParseError(f"bad magic 0x{magic:08x} at byte 0")
    type_code = (magic >> 8) & 0xFF
    if type_code != 0x08:
        raise IdxParseError(f"unsupported type code 0x{type_code:02x} at byte 2")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxParseError(f"truncated dims at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) != header_len + count:
        raise IdxParseError(
            f"payload length {len(raw) - header_len} != {count} at byte {header_len}"
        )
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)
    return IdxTensor(magic=magic, dims=dims, payload=payload)


def serialize_idx(t: IdxTensor) -> bytes:
    out = struct.pack(">I", t.magic)
    out += struct.pack(f">{len(t.dims)}I", *t.dims)
    out += np.ascontiguousarray(t.payload, dtype=np.uint8).tobytes()
    return out


def load_idx_file(path) -> IdxTensor:
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def load_mnist_pair(image_path, label_path, limit: int | None = None) -> MultimodalDataset:
    """Aligned image/label modalities: images flattened to [0,1], labels one-hot."""
    images = load_idx_file(image_path)
    labels = load_idx_file(label_path)
    if images.magic != IDX_IMAGES_MAGIC:
        raise IdxParseError(f"expected image magic, got 0x{images.magic:08x}")
    if labels.magic != IDX_LABELS_MAGIC:
        raise IdxParseError(f"expected label magic, got 0x{labels.magic:08x}")
    if images.dims[0] != labels.dims[0]:
        raise IdxParseError(
            f"count mismatch: {images.dims[0]} images vs {labels.dims[0]} labels"
        )
    n = images.dims[0] if limit is None else min(limit, images.dims[0])
    img = images.payload[:n].reshape(n, -1).astype(np.float64) / 255.0
    lab = labels.payload[:n].astype(np.int64)
    onehot = np.zeros((n, 10), dtype=np.float64)
    onehot[np.arange(n), lab] = 1.0
    return MultimodalDataset(
        {"image": img, "label": onehot},
        meta={"image_shape": tuple(images.dims[1:]), "classes": 10},
    )


def render_bar(theta: float, image_size: int) -> np.ndarray:
    """Anti-aliased bar through the image center at angle theta (0 = horizontal).

    Pixel intensity falls off linearly with perpendicular distance to the
    bar's axis over a one-pixel band.
    """
    half = (image_size - 1) / 2.0
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    # centered coordinates, y up
    cx = xs - half
    cy = half - ys
    # signed perpendicular distance to the line through origin at angle theta
    dist = np.abs(-np.sin(theta) * cx + np.cos(theta) * cy)
    along = np.abs(np.cos(theta) * cx + np.sin(theta) * cy)
    width = 1.0
    img = np.clip(1.0 - dist / width, 0.0, 1.0)
    img[along > half] = 0.0
    return img


def make_synthetic_bars(count: int, image_size: int = 16, noise_sd: float = 0.01,
                        seed: int = 0) -> MultimodalDataset:
    """Two-modality dataset driven by a latent angle theta ~ U[0, pi).

    Modality "image": flattened bar image at angle theta. Modality "angle":
    (cos 2*theta, sin 2*theta) plus Gaussian noise; the doubling makes the
    code unique despite the bar's half-turn symmetry.
    """
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    rng = make_rng(seed, 0xBA25)
    thetas = rng.uniform(0.0, np.pi, size=count)
    images = np.stack([render_bar(t, image_size).reshape(-1) for t in thetas])
    codes = np.stack([np.cos(2 * thetas), np.sin(2 * thetas)], axis=1)
    codes = codes + rng.normal(scale=noise_sd, size=codes.shape)
    return MultimodalDataset(
        {"image": images, "angle": codes},
        meta={"image_shape": (image_size, image_size), "thetas": thetas,
              "noise_sd": noise_sd},
    )


def batch_iter(dataset: MultimodalDataset, batch_size: int, shuffle_seed: int | None = None):
    """Deterministic shuffled minibatches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = make_rng(shuffle_seed, 0x50F).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield {name: arr[idx] for name, arr in dataset.modalities.items()}
