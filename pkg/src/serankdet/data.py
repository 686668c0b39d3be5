"""Synthetic infrared scenes, the on-disk dataset format, and checkpoints.

Scenes are low-frequency cosine clutter plus a handful of dim Gaussian
blobs, optionally degraded by white noise on the 0-255 scale.  Ground
truth is each blob's half-peak superlevel set, so masks are deterministic
discs independent of background and noise.

Dataset layout: a directory with manifest.txt listing
"<image-file> <mask-file>" per line.  Images are "IRS1" + u32 H + u32 W +
H*W little-endian float32; masks are "IRM1" + u32 H + u32 W + H*W bytes.
Checkpoints are "SRDK" + u32 version + u32 count + named float32 tensors +
CRC32 trailer.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .network import Model, NetConfig
from .tensor import Tensor

IMAGE_MAGIC = b"IRS1"
MASK_MAGIC = b"IRM1"
CKPT_MAGIC = b"SRDK"
CKPT_VERSION = 1
MAX_PIXELS = 1 << 28
TARGET_AREA_FRACTION = 0.0015


class FormatError(Exception):
    """Base for every dataset/checkpoint format failure."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class SizeOverflowError(FormatError):
    pass


class MissingEntryError(FormatError):
    pass


class PairShapeMismatchError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class UnknownTensorError(FormatError):
    pass


class Sample(NamedTuple):
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray   # (1, H, W) uint8 in {0, 1}


@dataclass
class SynthParams:
    count: int = 8
    size: int = 64
    targets_min: int = 1
    targets_max: int = 3
    sigma_min: float = 0.7
    sigma_max: float = 2.5
    contrast_min: float = 0.1
    contrast_max: float = 0.6
    background: float = 1.0  # clutter contrast in [0, 1]
    noise_sigma: float = 0.0  # white-noise sigma on the 0-255 scale
    seed: int = 0


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _background(rng: np.random.Generator, size: int, contrast: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    g = np.zeros((size, size), dtype=np.float64)
    for _ in range(3):
        freq = rng.uniform(0.5, 3.0)
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.3, 1.0)
        g += amp * np.cos(2.0 * math.pi * freq * (math.cos(theta) * xs + math.sin(theta) * ys) + phase)
    lo, hi = g.min(), g.max()
    centered = (g - lo) / (hi - lo) - 0.5 if hi > lo else np.zeros_like(g)
    return 0.45 + 0.5 * contrast * centered  # range within [0.2, 0.7]


def _max_sigma(size: int, requested: float) -> float:
    # Keep the half-peak disc inside the small-target area budget.
    r_cap = 0.9 * math.sqrt(TARGET_AREA_FRACTION * size * size / math.pi)
    return min(requested, r_cap / math.sqrt(2.0 * math.log(2.0)))


def synth_scene(p: SynthParams, index: int) -> Sample:
    """Deterministic scene for (p.seed, index)."""
    if p.size % 16:
        raise ValueError(f"scene size must be divisible by 16, got {p.size}")
    rng = _scene_rng(p.seed, index)
    size = p.size
    image = _background(rng, size, p.background)
    mask = np.zeros((size, size), dtype=np.uint8)

    sigma_hi = _max_sigma(size, p.sigma_max)
    sigma_lo = min(p.sigma_min, sigma_hi)
    n_targets = int(rng.integers(p.targets_min, p.targets_max + 1))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    placed = []  # (cy, cx, half-peak radius)
    for _ in range(n_targets):
        sigma = rng.uniform(sigma_lo, sigma_hi)
        peak = rng.uniform(p.contrast_min, p.contrast_max)
        radius = sigma * math.sqrt(2.0 * math.log(2.0))
        margin = 3.0 * sigma + 1.0
        for _attempt in range(200):
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (radius + pr + 3.0) ** 2
                   for py, px, pr in placed):
                break
        else:
            continue  # crowded frame: drop this target, stay deterministic
        placed.append((cy, cx, radius))
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        image += peak * np.exp(-d2 / (2.0 * sigma * sigma))
        mask |= (d2 < 2.0 * math.log(2.0) * sigma * sigma).astype(np.uint8)

    image = np.clip(image, 0.0, 1.0)
    if p.noise_sigma:
        image = np.clip(image + rng.normal(0.0, p.noise_sigma / 255.0, size=image.shape), 0.0, 1.0)
    return Sample(image=image[None].astype(np.float32), mask=mask[None])


def synth_dataset(p: SynthParams) -> list[Sample]:
    return [synth_scene(p, i) for i in range(p.count)]


# ---------------------------------------------------------------------------
# dataset files


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"unexpected end of file while reading {what}")
    return buf


def _read_header(fh, magic: bytes, path: str):
    got = fh.read(4)
    if got != magic:
        raise BadMagicError(f"bad magic in {path}: expected {magic!r}, got {got!r}")
    h, w = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise SizeOverflowError(f"unreasonable extents {h}x{w} in {path}")
    return h, w


def _write_image(path: str, image: np.ndarray):
    h, w = image.shape[-2:]
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(image.reshape(h, w), dtype="<f4").tobytes())


def _write_mask(path: str, mask: np.ndarray):
    h, w = mask.shape[-2:]
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(mask.reshape(h, w), dtype=np.uint8).tobytes())


def _read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, IMAGE_MAGIC, path)
        payload = _read_exact(fh, 4 * h * w, "image payload")
    return np.frombuffer(payload, dtype="<f4").reshape(1, h, w).astype(np.float32)


def _read_mask(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, MASK_MAGIC, path)
        payload = _read_exact(fh, h * w, "mask payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(1, h, w).copy()


def write_dataset(directory: str, samples: list[Sample]):
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"{i:05d}.img"
        msk_name = f"{i:05d}.msk"
        _write_image(os.path.join(directory, img_name), s.image)
        _write_mask(os.path.join(directory, msk_name), s.mask)
        lines.append(f"{img_name} {msk_name}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_dataset(directory: str) -> list[Sample]:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise MissingEntryError(f"missing entry: {manifest}")
    samples = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                img_name, msk_name = line.split()
            except ValueError:
                raise FormatError(f"malformed manifest line: {line!r}") from None
            img_path = os.path.join(directory, img_name)
            msk_path = os.path.join(directory, msk_name)
            for pth in (img_path, msk_path):
                if not os.path.exists(pth):
                    raise MissingEntryError(f"missing entry: {pth}")
            image = _read_image(img_path)
            mask = _read_mask(msk_path)
            if image.shape != mask.shape:
                raise PairShapeMismatchError(
                    f"pair shape mismatch: {img_name} is {image.shape[-2:]}, "
                    f"{msk_name} is {mask.shape[-2:]}"
                )
            samples.append(Sample(image=image, mask=mask))
    return samples


# ---------------------------------------------------------------------------
# checkpoints


def _model_tensors(m: Model) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in m.named_parameters().items()}
    for name, st in m.named_norm_states().items():
        out[f"{name}.running_mean"] = st.running_mean
        out[f"{name}.running_var"] = st.running_var
    return out


def _meta_tensors(m: Model) -> dict[str, np.ndarray]:
    cfg = m.cfg
    flags = [cfg.deep_supervision, cfg.use_ddc, cfg.use_serank, cfg.use_lsff, cfg.use_pe]
    return {
        "meta/channels": np.asarray(cfg.channels, dtype=np.float32),
        "meta/offset_o": np.asarray([cfg.offset_o], dtype=np.float32),
        "meta/input_channels": np.asarray([cfg.input_channels], dtype=np.float32),
        "meta/lsff_kernel": np.asarray([cfg.lsff_kernel], dtype=np.float32),
        "meta/flags": np.asarray(flags, dtype=np.float32),
        "meta/seed": np.asarray([m.seed], dtype=np.float32),
        "meta/global_step": np.asarray([m.global_step], dtype=np.float32),
    }


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(m: Model, path: str):
    tensors = {**_meta_tensors(m), **_model_tensors(m)}
    body = [struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        body.append(_encode_tensor(name, tensors[name]))
    blob = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def _decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    tensors = {}
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedError(f"unexpected end of checkpoint while reading {what}")
        chunk = blob[off: off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem > MAX_PIXELS:
            raise SizeOverflowError(f"tensor {name} too large: {dims}")
        payload = take(4 * n_elem, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise FormatError("trailing bytes after last checkpoint tensor")
    return tensors


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic in {path}: expected {CKPT_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedError("unexpected end of checkpoint before checksum")
    blob, (stored_crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"checksum failure in {path}")
    tensors = _decode_tensors(blob)

    missing = [k for k in ("meta/channels", "meta/offset_o", "meta/input_channels",
                           "meta/lsff_kernel", "meta/flags", "meta/seed", "meta/global_step")
               if k not in tensors]
    if missing:
        raise FormatError(f"checkpoint lacks metadata entries: {missing}")
    flags = tensors.pop("meta/flags")
    cfg = NetConfig(
        channels=tuple(int(v) for v in tensors.pop("meta/channels")),
        offset_o=int(tensors.pop("meta/offset_o")[0]),
        input_channels=int(tensors.pop("meta/input_channels")[0]),
        lsff_kernel=int(tensors.pop("meta/lsff_kernel")[0]),
        deep_supervision=bool(flags[0]),
        use_ddc=bool(flags[1]),
        use_serank=bool(flags[2]),
        use_lsff=bool(flags[3]),
        use_pe=bool(flags[4]),
    )
    seed = int(tensors.pop("meta/seed")[0])
    step = int(tensors.pop("meta/global_step")[0])

    model = Model(cfg, seed)
    model.global_step = step
    expected = _model_tensors(model)
    for name, arr in tensors.items():
        if name not in expected:
            raise UnknownTensorError(f"unknown tensor name in checkpoint: {name}")
        if expected[name].shape != arr.shape:
            raise FormatError(f"tensor {name} has shape {arr.shape}, expected {expected[name].shape}")
        expected[name][...] = arr
    absent = set(expected) - set(tensors)
    if absent:
        raise FormatError(f"checkpoint lacks tensors: {sorted(absent)[:5]}")
    return model
