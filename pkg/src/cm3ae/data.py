"""Synthetic aligned RGB / Event / voxel samples and their on-disk formats.

Sample directory layout::

    rgb.png      8-bit RGB frame
    event.png    8-bit polarity frame (positive -> red, negative -> blue)
    events.vox   CMVX voxel file
    label.txt    optional, one integer line

CMVX layout (little-endian): magic ``b"CMVX"``, u32 version (1), u32 voxel
count, u32 record width, then ``count * width`` float32 values.
"""
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .encoders import resample_voxels
from .exceptions import ConfigError, FormatError, InputError

CMVX_MAGIC = b"CMVX"
CMVX_VERSION = 1
_CMVX_HEADER = struct.Struct("<4sIII")

SHAPE_CLASSES = ("square", "disc", "triangle", "cross")


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the moving-shapes generator.

    ``motion`` is the displacement in pixels between the two frames and
    ``threshold`` the log-free intensity step that fires one event.
    """

    image_size: int = 64
    num_shapes: int = 1
    num_classes: int = 4
    shape_size: tuple = (12, 24)
    motion: float = 4.0
    threshold: float = 0.1
    texture: float = 0.08
    voxel_grid: tuple = (8, 8, 4)
    events_per_voxel: int = 14
    voxel_count: int = 32
    max_retries: int = 3

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPE_CLASSES):
            raise ConfigError(f"num_classes must be in [2, {len(SHAPE_CLASSES)}]")
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive")
        if self.motion < 0:
            raise ConfigError("motion must be non-negative")


@dataclass
class SamplePair:
    rgb: np.ndarray
    event: np.ndarray
    voxels: np.ndarray = None
    label: int = None


# -- rendering ----------------------------------------------------------------


def shape_mask(kind, size, cx, cy, radius):
    """Boolean ``size x size`` mask of one shape centred at ``(cx, cy)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "disc":
        return dx * dx + dy * dy <= radius * radius
    if kind == "triangle":
        # apex up; base at cy + radius
        inside_y = (dy >= -radius) & (dy <= radius)
        half_width = (dy + radius) / 2.0
        return inside_y & (np.abs(dx) <= half_width)
    if kind == "cross":
        arm = radius / 3.0
        return ((np.abs(dx) <= radius) & (np.abs(dy) <= arm)) | (
            (np.abs(dy) <= radius) & (np.abs(dx) <= arm)
        )
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng, size, amplitude):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.7, size=3)
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    wave = np.stack([np.sin(2 * np.pi * (fx * xx + fy * yy) + ph) for ph in phase], axis=-1)
    return np.clip(base + amplitude * wave, 0.0, 1.0)


def _render(background, shapes, offset):
    img = background.copy()
    size = img.shape[0]
    for kind, cx, cy, r, color in shapes:
        m = shape_mask(kind, size, cx + offset[0], cy + offset[1], r)
        img[m] = color
    return img


def intensity(img):
    return img.mean(axis=-1)


def events_from_frames(frame0, frame1, threshold):
    """Per-pixel events from linear brightness interpolation between frames.

    A pixel whose intensity changes by ``d`` fires ``floor(|d| / threshold)``
    events of polarity ``sign(d)`` at times ``k * threshold / |d|``.

    Returns
    -------
    ndarray (M, 4) of (x, y, t, polarity) with integer pixel coordinates,
    polarity 1 for brightening and 0 for darkening, sorted by (t, y, x).
    """
    diff = intensity(frame1) - intensity(frame0)
    mag = np.abs(diff)
    # small epsilon keeps exact multiples of the threshold from flickering
    counts = np.floor(mag / threshold + 1e-9).astype(int)
    ys, xs = np.nonzero(counts)
    rows = []
    for y, x in zip(ys, xs):
        n = counts[y, x]
        ts = np.arange(1, n + 1) * threshold / mag[y, x]
        pol = 1.0 if diff[y, x] > 0 else 0.0
        rows.extend((x, y, min(t, 1.0), pol) for t in ts)
    if not rows:
        return np.zeros((0, 4))
    ev = np.asarray(rows, dtype=np.float64)
    order = np.lexsort((ev[:, 0], ev[:, 1], ev[:, 2]))
    return ev[order]


def render_event_frame(events, size):
    """Polarity frame: channel 0 marks positive events, channel 2 negative."""
    frame = np.zeros((size, size, 3))
    if len(events):
        x = events[:, 0].astype(int)
        y = events[:, 1].astype(int)
        pos = events[:, 3] > 0.5
        frame[y[pos], x[pos], 0] = 1.0
        frame[y[~pos], x[~pos], 2] = 1.0
    return frame


def normalize_events(events, size):
    """Map pixel coordinates to [0, 1]; t and polarity are already in range."""
    out = events.copy()
    out[:, 0] /= size - 1
    out[:, 1] /= size - 1
    return out


def build_voxels(events, size, grid, events_per_voxel):
    """Bin normalized events into a (gx, gy, gt) grid, one record per occupied cell.

    Each record holds up to ``events_per_voxel`` events in time order,
    padded by cycling through the cell's events; rows are flattened
    (x, y, t, p) per event.
    """
    gx, gy, gt = grid
    cx = np.minimum((events[:, 0] * gx).astype(int), gx - 1)
    cy = np.minimum((events[:, 1] * gy).astype(int), gy - 1)
    ct = np.minimum((events[:, 2] * gt).astype(int), gt - 1)
    cell = (ct * gy + cy) * gx + cx
    records = []
    for c in np.unique(cell):
        members = events[cell == c]
        members = members[np.argsort(members[:, 2], kind="stable")][:events_per_voxel]
        reps = np.resize(np.arange(len(members)), events_per_voxel)
        records.append(members[reps].reshape(-1))
    return np.asarray(records, dtype=np.float64)


def generate_synthetic_pair(seed, config=None):
    """Render one aligned (RGB, Event frame, voxels, label) sample.

    A pure function of ``(seed, config)``. Raises ``InputError`` if no
    events fire even after doubling the motion ``max_retries`` times.
    """
    config = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    size = config.image_size
    background = _background(rng, size, config.texture)
    shapes, areas = [], []
    for _ in range(config.num_shapes):
        cls = int(rng.integers(config.num_classes))
        r = rng.uniform(*config.shape_size) / 2.0
        margin = r + config.motion * 2 ** config.max_retries
        margin = min(margin, size / 2 - 1)
        cx, cy = rng.uniform(margin, size - margin, size=2)
        # contrast against the background so edges fire events
        if background.mean() < 0.45:
            color = rng.uniform(0.75, 1.0, size=3)
        else:
            color = rng.uniform(0.0, 0.2, size=3)
        shapes.append((SHAPE_CLASSES[cls], cx, cy, r, color))
        areas.append((shape_mask(SHAPE_CLASSES[cls], size, cx, cy, r).sum(), cls))
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    label = max(areas)[1]

    motion = config.motion
    for _ in range(config.max_retries + 1):
        d = motion * direction
        frame0 = _render(background, shapes, (0.0, 0.0))
        frame1 = _render(background, shapes, (d[0], d[1]))
        events = events_from_frames(frame0, frame1, config.threshold)
        if len(events):
            break
        motion *= 2.0
    else:
        raise InputError("scene produced no events after retries (static scene?)")

    norm = normalize_events(events, size)
    raw = build_voxels(norm, size, config.voxel_grid, config.events_per_voxel)
    voxels = resample_voxels(raw, config.voxel_count, rng).astype(np.float32)
    return SamplePair(
        rgb=frame1,
        event=render_event_frame(events, size),
        voxels=voxels,
        label=label,
    )


def num_workers():
    """Loader parallelism from ``CM3AE_NUM_WORKERS`` (0 = deterministic serial)."""
    try:
        return max(0, int(os.environ.get("CM3AE_NUM_WORKERS", "0")))
    except ValueError:
        raise ConfigError("CM3AE_NUM_WORKERS must be an integer") from None


def sample_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_dataset(count, seed, config=None, workers=None):
    """``count`` synthetic pairs; output order never depends on ``workers``."""
    seeds = sample_seeds(seed, count)
    workers = num_workers() if workers is None else workers
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: generate_synthetic_pair(s, config), seeds))
    return [generate_synthetic_pair(s, config) for s in seeds]


def collate(pairs, dtype=torch.float32):
    """Stack pairs into ``(rgb, event, voxels, labels)`` tensors."""
    rgb = torch.as_tensor(np.stack([p.rgb for p in pairs]), dtype=dtype)
    event = torch.as_tensor(np.stack([p.event for p in pairs]), dtype=dtype)
    voxels = None
    if all(p.voxels is not None for p in pairs):
        voxels = torch.as_tensor(np.stack([p.voxels for p in pairs]), dtype=dtype)
    labels = None
    if all(p.label is not None for p in pairs):
        labels = torch.as_tensor([p.label for p in pairs], dtype=torch.long)
    return rgb, event, voxels, labels


# -- CMVX voxel files ------------------------------------------------------------


def write_voxel_file(voxels, path):
    voxels = np.asarray(voxels)
    if voxels.ndim != 2:
        raise InputError(f"voxel set must be 2-D (count, width), got {voxels.shape}")
    count, width = voxels.shape
    with open(path, "wb") as f:
        f.write(_CMVX_HEADER.pack(CMVX_MAGIC, CMVX_VERSION, count, width))
        f.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_voxel_file(path, record_width=None):
    """Read a CMVX file into a ``(count, width)`` float32 array.

    Raises ``FormatError`` (with byte offset) on a bad magic, version,
    truncated or oversized payload, or a record width other than
    ``record_width`` when one is given.
    """
    data = Path(path).read_bytes()
    if len(data) < _CMVX_HEADER.size:
        raise FormatError(
            f"file is {len(data)} bytes, shorter than the {_CMVX_HEADER.size}-byte header",
            len(data),
        )
    magic, version, count, width = _CMVX_HEADER.unpack_from(data)
    if magic != CMVX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CMVX_MAGIC!r}", 0)
    if version != CMVX_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if record_width is not None and width != record_width:
        raise FormatError(f"record width {width} != expected {record_width}", 12)
    expected = _CMVX_HEADER.size + count * width * 4
    if len(data) != expected:
        raise FormatError(
            f"expected {expected} bytes for {count}x{width} records, found {len(data)}",
            min(len(data), expected),
        )
    body = np.frombuffer(data, dtype="<f4", offset=_CMVX_HEADER.size)
    return body.reshape(count, width).astype(np.float32)


# -- sample directories -------------------------------------------------------------


def _to_uint8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_sample(pair, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(pair.rgb), "RGB").save(directory / "rgb.png")
    Image.fromarray(_to_uint8(pair.event), "RGB").save(directory / "event.png")
    if pair.voxels is not None:
        write_voxel_file(pair.voxels, directory / "events.vox")
    if pair.label is not None:
        (directory / "label.txt").write_text(f"{int(pair.label)}\n")


def _read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_sample(directory, image_size=None, record_width=None, use_voxels=True):
    """Load one sample directory into a :class:`SamplePair`.

    Missing ``events.vox`` is tolerated only when ``use_voxels`` is False.
    """
    directory = Path(directory)
    for name in ("rgb.png", "event.png") + (("events.vox",) if use_voxels else ()):
        if not (directory / name).is_file():
            raise FileNotFoundError(f"{name} not found in {directory}")
    rgb = _read_png(directory / "rgb.png")
    event = _read_png(directory / "event.png")
    if rgb.shape != event.shape:
        raise InputError(f"rgb {rgb.shape} and event {event.shape} sizes differ")
    if image_size is not None and rgb.shape[:2] != (image_size, image_size):
        raise InputError(f"image is {rgb.shape[:2]}, expected {image_size}x{image_size}")
    voxels = None
    if use_voxels:
        voxels = read_voxel_file(directory / "events.vox", record_width)
    label = None
    if (directory / "label.txt").is_file():
        label = int((directory / "label.txt").read_text().strip())
    return SamplePair(rgb, event, voxels, label)


def load_dataset(root, **kwargs):
    """Every immediate subdirectory of ``root`` holding an ``rgb.png``, sorted by name."""
    dirs = sorted(p for p in Path(root).iterdir() if (p / "rgb.png").is_file())
    if not dirs:
        raise FileNotFoundError(f"no sample directories under {root}")
    return [load_sample(d, **kwargs) for d in dirs]
