"""Dataset ingestion, luminance derivation, and the synthetic scene generator.

On-disk layout of a dataset split::

    <root>/rgb/<name>.ppm      8-bit binary PPM (P6), values 0..255
    <root>/depth/<name>.pgm    16-bit big-endian binary PGM (P5), 0 = invalid
    <root>/label/<name>.pgm    8-bit binary PGM (P5), 255 = ignore
    <root>/index.txt           one whitespace-separated rgb/depth/label triple
                               per line, paths relative to <root>
    <root>/dataset.conf        key = value summary (classes, resolution, ...)

Loading resizes color and depth bilinearly and labels by nearest neighbor,
normalizes depth per image to [0, 1] by min-max over its valid (nonzero)
pixels, and derives the luminance plane from the resized color image with
BT.601 weights.

The synthetic generator paints layered rectangles and ellipses. Every class
owns a distinct depth band, while the color palette deliberately overlaps
between some classes, so depth is genuinely informative: a color-only model
cannot separate palette-sharing classes, a depth-aware one can.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import Variant

IGNORE_INDEX = 255

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601


# ---------------------------------------------------------------------------
# netpbm io
# ---------------------------------------------------------------------------

def _read_pnm_header(blob, path):
    # magic, width, height, maxval separated by whitespace/comments, then one
    # whitespace byte before the raster.
    pos = 0
    fields = []
    while len(fields) < 4:
        if pos >= len(blob):
            raise DataError("%s: truncated header" % path)
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            fields.append(blob[start:pos])
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise DataError("%s: malformed header" % path)
    pos += 1
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise DataError("%s: non-numeric header fields" % path)
    return fields[0], width, height, maxval, pos


def read_ppm(path):
    """8-bit binary PPM -> float32 (3, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, width, height, maxval, pos = _read_pnm_header(blob, path)
    if magic != b"P6":
        raise DataError("%s: expected binary PPM (P6), got %r" % (path, magic))
    if maxval != 255:
        raise DataError("%s: expected maxval 255, got %d" % (path, maxval))
    need = width * height * 3
    raster = np.frombuffer(blob, dtype=np.uint8, count=-1, offset=pos)
    if raster.size < need:
        raise DataError("%s: raster holds %d bytes, needs %d" % (path, raster.size, need))
    img = raster[:need].reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_ppm(path, rgb01):
    """float (3, H, W) in [0, 1] -> 8-bit binary PPM."""
    arr = np.clip(np.rint(np.asarray(rgb01) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_pgm(path):
    """Binary PGM -> uint8 (H, W) for maxval 255, uint16 for maxval 65535."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, width, height, maxval, pos = _read_pnm_header(blob, path)
    if magic != b"P5":
        raise DataError("%s: expected binary PGM (P5), got %r" % (path, magic))
    if maxval == 255:
        dtype, itemsize = np.uint8, 1
    elif maxval == 65535:
        dtype, itemsize = np.dtype(">u2"), 2  # network byte order
    else:
        raise DataError("%s: unsupported maxval %d" % (path, maxval))
    need = width * height
    raster = np.frombuffer(blob, dtype=dtype, count=-1, offset=pos)
    if raster.size < need:
        raise DataError("%s: raster holds %d values, needs %d" % (path, raster.size, need))
    out = raster[:need].reshape(height, width)
    return out.astype(np.uint16) if itemsize == 2 else out.copy()


def write_pgm(path, values, maxval):
    """uint (H, W) -> binary PGM; 16-bit rasters are written big-endian."""
    arr = np.asarray(values)
    h, w = arr.shape
    if maxval == 255:
        payload = arr.astype(np.uint8).tobytes()
    elif maxval == 65535:
        payload = arr.astype(">u2").tobytes()
    else:
        raise DataError("unsupported maxval %d" % maxval)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(payload)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _bilinear_axis_coords(dst, src):
    centers = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(centers).astype(np.int64)
    frac = centers - lo
    lo0 = np.clip(lo, 0, src - 1)
    lo1 = np.clip(lo + 1, 0, src - 1)
    return lo0, lo1, frac


def resize_bilinear(planes, target):
    """Resize (C, H, W) float planes to (C, th, tw), half-pixel centers."""
    c, h, w = planes.shape
    th, tw = target
    if (h, w) == (th, tw):
        return planes.copy()
    y0, y1, fy = _bilinear_axis_coords(th, h)
    x0, x1, fx = _bilinear_axis_coords(tw, w)
    rows0 = planes[:, y0]
    rows1 = planes[:, y1]
    rows = rows0 + (rows1 - rows0) * fy[None, :, None]
    cols0 = rows[:, :, x0]
    cols1 = rows[:, :, x1]
    return (cols0 + (cols1 - cols0) * fx[None, None, :]).astype(planes.dtype)


def resize_nearest(plane, target):
    """Nearest-neighbor resize of an (H, W) plane (labels, masks)."""
    h, w = plane.shape
    th, tw = target
    if (h, w) == (th, tw):
        return plane.copy()
    ys = np.minimum((np.floor((np.arange(th) + 0.5) * h / th)).astype(np.int64), h - 1)
    xs = np.minimum((np.floor((np.arange(tw) + 0.5) * w / tw)).astype(np.int64), w - 1)
    return plane[np.ix_(ys, xs)]


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training item; all planes share H and W, values live in [0, 1]."""
    rgb: np.ndarray        # (3, H, W) float32
    depth: np.ndarray      # (1, H, W) float32
    luminance: np.ndarray  # (1, H, W) float32, derived from rgb
    labels: np.ndarray     # (H, W) int32, values in 0..K-1 or IGNORE_INDEX


@dataclass
class DatasetIndex:
    root: str
    entries: list          # (rgb_path, depth_path, label_path) absolute paths
    split: str
    num_classes: int


def rgb_to_luminance(rgb):
    """BT.601 luma of a (3, H, W) image in [0, 1], clamped to [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DataError("luminance needs a (3, H, W) image, got %r" % (rgb.shape,))
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise DataError("rgb values outside [0, 1] (min %.4g, max %.4g)"
                        % (rgb.min(), rgb.max()))
    r, g, b = LUMA_WEIGHTS
    y = r * rgb[0] + g * rgb[1] + b * rgb[2]
    return np.clip(y, 0.0, 1.0)[None].astype(np.float32)


def normalize_depth(raw):
    """Per-image min-max to [0, 1] over valid pixels; invalid (0) stays 0.

    A constant valid region maps to all-zero (degenerate-range rule)."""
    raw = np.asarray(raw, dtype=np.float64)
    valid = raw > 0
    out = np.zeros(raw.shape, dtype=np.float32)
    if not valid.any():
        return out
    lo = raw[valid].min()
    hi = raw[valid].max()
    if hi > lo:
        out[valid] = ((raw[valid] - lo) / (hi - lo)).astype(np.float32)
    return out


def load_sample(entry, target_resolution=None, num_classes=None):
    """Read one (rgb, depth, label) triple, resize, normalize, derive luma."""
    rgb_path, depth_path, label_path = entry
    rgb = read_ppm(rgb_path)
    depth_raw = read_pgm(depth_path).astype(np.float64)
    labels = read_pgm(label_path)
    if rgb.shape[1:] != depth_raw.shape or rgb.shape[1:] != labels.shape:
        raise DataError(
            "%s: plane sizes disagree (rgb %r, depth %r, labels %r)"
            % (rgb_path, rgb.shape[1:], depth_raw.shape, labels.shape))
    if target_resolution is not None:
        rgb = resize_bilinear(rgb, target_resolution)
        depth_raw = resize_bilinear(depth_raw[None], target_resolution)[0]
        labels = resize_nearest(labels, target_resolution)
    depth = normalize_depth(depth_raw)[None]
    labels = labels.astype(np.int32)
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
        if bad.any():
            raise DataError(
                "%s: label %d exceeds class count %d"
                % (label_path, int(labels[bad][0]), num_classes))
    return Sample(rgb=np.clip(rgb, 0.0, 1.0), depth=depth,
                  luminance=rgb_to_luminance(np.clip(rgb, 0.0, 1.0)),
                  labels=labels)


def load_dataset(root, target_resolution=None):
    """Read index + conf and load every sample of a split into memory."""
    index = read_index(root)
    samples = [load_sample(e, target_resolution, index.num_classes)
               for e in index.entries]
    return index, samples


# ---------------------------------------------------------------------------
# index and conf files
# ---------------------------------------------------------------------------

def write_index(index):
    lines = []
    for rgb_path, depth_path, label_path in index.entries:
        lines.append("%s %s %s" % (os.path.relpath(rgb_path, index.root),
                                   os.path.relpath(depth_path, index.root),
                                   os.path.relpath(label_path, index.root)))
    with open(os.path.join(index.root, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(index.root, "dataset.conf"), "w") as fh:
        fh.write("classes = %d\nsplit = %s\nsamples = %d\n"
                 % (index.num_classes, index.split, len(index.entries)))


def read_index(root):
    index_path = os.path.join(root, "index.txt")
    conf_path = os.path.join(root, "dataset.conf")
    if not os.path.exists(index_path):
        raise DataError("no index.txt under %s" % root)
    entries = []
    with open(index_path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError("%s:%d: expected three paths, got %d"
                                % (index_path, line_no, len(parts)))
            triple = tuple(os.path.join(root, p) for p in parts)
            for p in triple:
                if not os.path.exists(p):
                    raise DataError("%s:%d: missing file %s" % (index_path, line_no, p))
            entries.append(triple)
    num_classes = 0
    split = "train"
    if os.path.exists(conf_path):
        with open(conf_path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key == "classes":
                    num_classes = int(value)
                elif key == "split":
                    split = value
    return DatasetIndex(root=root, entries=entries, split=split,
                        num_classes=num_classes)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def class_palette(num_classes):
    """Base colors per class; classes >= 1 share hues pairwise so that color
    alone cannot separate them."""
    colors = [np.array([0.35, 0.35, 0.35])]  # background
    hues = np.linspace(0.0, 1.0, max(1, (num_classes - 1 + 1) // 2), endpoint=False)
    for k in range(1, num_classes):
        hue = hues[(k - 1) // 2]
        colors.append(np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.85)))
    return np.stack(colors[:num_classes])


def class_depth_bands(num_classes):
    """Disjoint depth bands per class: foreground classes tile the near range
    in class order, the background owns its own far band."""
    edges = np.linspace(0.08, 0.82, num_classes)
    bands = {0: (0.88, 0.98)}
    for k in range(1, num_classes):
        bands[k] = (float(edges[k - 1]), float(edges[k]))
    return bands


def _object_mask(kind, h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_dataset(out_root, n_samples, resolution=(64, 128), num_classes=4,
                  seed=0, split="train", color_noise=0.08, depth_noise=0.015):
    """Generate a dataset of layered shapes; deterministic in ``seed``.

    Scene recipe: a background plus 3..6 objects, each assigned a foreground
    class, a position, and a size. Objects are painted far-to-near, so the
    label map is exactly the visible class. Depth comes from the class band
    (plus a mild within-object gradient and noise), and color from the
    palette with per-object jitter and per-pixel noise.
    """
    if num_classes < 2:
        raise ConfigError("need at least 2 classes, got %d" % num_classes)
    if num_classes > 254:
        raise ConfigError("at most 254 classes (255 is the ignore value)")
    h, w = resolution
    if h % 8 or w % 8:
        raise ConfigError("resolution %dx%d must be divisible by 8" % (h, w))

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5CE)))
    palette = class_palette(num_classes)
    bands = class_depth_bands(num_classes)

    for sub in ("rgb", "depth", "label"):
        os.makedirs(os.path.join(out_root, sub), exist_ok=True)

    entries = []
    for i in range(n_samples):
        rgb = np.empty((3, h, w), dtype=np.float64)
        base = palette[0] * rng.uniform(0.7, 1.3)
        rgb[:] = base[:, None, None]
        lo, hi = bands[0]
        depth = rng.uniform(lo, hi) + rng.normal(0, depth_noise, (h, w))
        labels = np.zeros((h, w), dtype=np.int32)

        n_objects = int(rng.integers(3, 7))
        classes = rng.integers(1, num_classes, size=n_objects)
        classes[0] = 1 + i % (num_classes - 1)  # guarantees per-class coverage
        # painter's order: farther bands first, nearer objects occlude
        order = np.argsort([-bands[int(c)][0] for c in classes], kind="stable")
        for j in order:
            cls = int(classes[j])
            ry = int(rng.integers(h // 10 + 1, h // 3 + 1))
            rx = int(rng.integers(w // 10 + 1, w // 3 + 1))
            cy = int(rng.integers(0, h))
            cx = int(rng.integers(0, w))
            mask = _object_mask(int(rng.integers(0, 2)), h, w, cy, cx, ry, rx)
            if not mask.any():
                continue
            blo, bhi = bands[cls]
            level = rng.uniform(blo + 0.1 * (bhi - blo), bhi - 0.1 * (bhi - blo))
            tilt = rng.uniform(-0.03, 0.03)
            yy = np.mgrid[0:h, 0:w][0]
            depth = np.where(mask, level + tilt * (yy - cy) / max(1, h), depth)
            color = np.clip(palette[cls] * rng.uniform(0.75, 1.25)
                            + rng.normal(0, 0.05, 3), 0.02, 1.0)
            for c in range(3):
                rgb[c] = np.where(mask, color[c], rgb[c])
            labels = np.where(mask, cls, labels)

        rgb += rng.normal(0, color_noise, rgb.shape)
        rgb = np.clip(rgb, 0.0, 1.0)
        depth = np.clip(depth + rng.normal(0, depth_noise, (h, w)), 0.02, 1.0)

        name = "%05d" % i
        rgb_path = os.path.join(out_root, "rgb", name + ".ppm")
        depth_path = os.path.join(out_root, "depth", name + ".pgm")
        label_path = os.path.join(out_root, "label", name + ".pgm")
        write_ppm(rgb_path, rgb)
        write_pgm(depth_path, np.rint(depth * 65535.0).astype(np.uint16), 65535)
        write_pgm(label_path, labels.astype(np.uint8), 255)
        entries.append((rgb_path, depth_path, label_path))

    index = DatasetIndex(root=out_root, entries=entries, split=split,
                         num_classes=num_classes)
    write_index(index)
    return index


# ---------------------------------------------------------------------------
# model input assembly
# ---------------------------------------------------------------------------

def build_inputs(samples, variant):
    """Stack a list of samples into the input slots of a variant."""
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    luma = np.stack([s.luminance for s in samples])
    if variant == Variant.ERFNET_RGB:
        return {"rgb": rgb}
    if variant == Variant.ERFNET_DEPTH:
        return {"depth": depth}
    if variant == Variant.ERFNET_STACK:
        return {"rgbd": np.concatenate([rgb, depth], axis=1)}
    if variant == Variant.LDF_WO_Y:
        return {"rgb": rgb, "dy": depth}
    if variant == Variant.LDF_RGB_RGB:
        return {"rgb": rgb, "dy": rgb.copy()}
    if variant in (Variant.LDFNET, Variant.LDF_NON_DENSE, Variant.LDF_WO_SHALLOW,
                   Variant.LDF_58_WO_SHALLOW):
        return {"rgb": rgb, "dy": np.concatenate([depth, luma], axis=1)}
    raise ConfigError("no input recipe for variant %r" % (variant,))


def batch_labels(samples):
    return np.stack([s.labels for s in samples])


def label_color_table(num_classes):
    """Vivid uint8 color per class for rendered label maps; ignore is black."""
    table = np.zeros((256, 3), dtype=np.uint8)
    for k in range(num_classes):
        hue = (k * 0.61803398875) % 1.0  # golden-ratio spacing
        rgb = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
        table[k] = np.rint(np.array(rgb) * 255.0).astype(np.uint8)
    return table


def render_labels(labels, num_classes):
    """(H, W) label map -> (3, H, W) float image in [0, 1]."""
    table = label_color_table(num_classes)
    colored = table[np.asarray(labels, dtype=np.int64)]
    return colored.transpose(2, 0, 1).astype(np.float32) / 255.0
