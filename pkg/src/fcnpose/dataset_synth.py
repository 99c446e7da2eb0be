"""Synthetic articulated-arm scenes with keypoint and mask annotations.

Each sample is a rendered 7-link kinematic chain on a cluttered background.
The 8 keypoints are the exact joint positions; the annotation masks follow
the disk/stroke rules used for the real captures: one disk of a configured
radius per keypoint plus one stroked polyline covering the whole skeleton.
The reference radii (6 px disk, 30 px stroke at 1080-pixel frames) scale
linearly with ``min(H, W) / 1080`` and are floored at 2 px so desk-scale
renders keep usable targets.

Generation is a pure function of (config, seed): sample i derives its own
child seed, so parallel and serial generation agree sample-for-sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, GenerationError

__all__ = [
    "KeypointSet",
    "Sample",
    "ArmConfig",
    "AugmentParams",
    "scaled_radius",
    "scaled_stroke",
    "gen_scene",
    "rasterize_masks",
    "augment",
    "build_dataset",
    "save_dataset",
    "load_dataset",
]

N_KEYPOINTS = 8
N_LINKS = 7
REF_RESOLUTION = 1080.0
REF_RADIUS = 6.0
REF_STROKE = 30.0
MIN_ANNOTATION_PX = 2.0


def scaled_radius(h: int, w: int) -> float:
    """Keypoint disk radius at a given render resolution."""
    return max(MIN_ANNOTATION_PX, REF_RADIUS * min(h, w) / REF_RESOLUTION)


def scaled_stroke(h: int, w: int) -> float:
    """Skeleton stroke thickness at a given render resolution."""
    return max(MIN_ANNOTATION_PX, REF_STROKE * min(h, w) / REF_RESOLUTION)


@dataclass
class KeypointSet:
    """8 keypoints as (x, y) pixel coordinates plus visibility flags."""

    xy: np.ndarray        # (8, 2) float32
    visible: np.ndarray   # (8,) bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float32).reshape(N_KEYPOINTS, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(N_KEYPOINTS)

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.xy.copy(), self.visible.copy())

    @classmethod
    def all_visible(cls, xy) -> "KeypointSet":
        return cls(np.asarray(xy, dtype=np.float32), np.ones(N_KEYPOINTS, bool))


@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1]
    keypoints: KeypointSet
    masks: np.ndarray       # (9, H, W) float32 in {0, 1}

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class ArmConfig:
    """Scene geometry and rendering knobs.

    Link lengths and joint ranges define the kinematic chain; the first
    range is the absolute heading of link 1, later ranges are relative
    bends. H and W must be divisible by 32 so rendered samples feed the
    network directly.
    """

    height: int = 64
    width: int = 64
    link_lengths: tuple = ()
    joint_ranges: tuple = ()      # 7 (lo, hi) radians
    base_xy: tuple = (0.0, 0.0)
    stroke_widths: tuple = ()     # 7 per-link draw widths (px)
    radius_px: float = 2.0        # keypoint mask disk radius
    stroke_px: float = 2.0        # skeleton mask stroke thickness
    margin_px: float = 1.0        # keypoints must stay this far inside
    clutter_shapes: int = 6
    occluders: int = 0            # random occluding rectangles per scene
    max_retries: int = 200

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ContractViolation(
                f"render resolution must be divisible by 32, got "
                f"{self.height}x{self.width}"
            )
        if len(self.link_lengths) != N_LINKS:
            raise ContractViolation(f"need {N_LINKS} link lengths")
        if len(self.joint_ranges) != N_LINKS:
            raise ContractViolation(f"need {N_LINKS} joint ranges")
        if len(self.stroke_widths) != N_LINKS:
            raise ContractViolation(f"need {N_LINKS} stroke widths")

    @classmethod
    def default(cls, height: int = 64, width: int = 64, *,
                occluders: int = 0) -> "ArmConfig":
        """Desk-scale defaults, proportional to the render resolution."""
        s = min(height, width)
        fractions = (0.21, 0.18, 0.16, 0.13, 0.11, 0.09, 0.08)
        widths = tuple(max(1.5, f) for f in
                       (0.055 * s, 0.05 * s, 0.045 * s, 0.04 * s,
                        0.035 * s, 0.03 * s, 0.025 * s))
        first = (math.radians(-115.0), math.radians(-25.0))
        rest = (math.radians(-50.0), math.radians(50.0))
        return cls(
            height=height,
            width=width,
            link_lengths=tuple(f * s for f in fractions),
            joint_ranges=(first,) + (rest,) * (N_LINKS - 1),
            base_xy=(0.30 * width, 0.82 * height),
            stroke_widths=widths,
            radius_px=scaled_radius(height, width),
            stroke_px=scaled_stroke(height, width),
            occluders=occluders,
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "link_lengths": list(self.link_lengths),
            "joint_ranges": [list(r) for r in self.joint_ranges],
            "base_xy": list(self.base_xy),
            "stroke_widths": list(self.stroke_widths),
            "radius_px": self.radius_px,
            "stroke_px": self.stroke_px,
            "margin_px": self.margin_px,
            "clutter_shapes": self.clutter_shapes,
            "occluders": self.occluders,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmConfig":
        return cls(
            height=d["height"],
            width=d["width"],
            link_lengths=tuple(d["link_lengths"]),
            joint_ranges=tuple(tuple(r) for r in d["joint_ranges"]),
            base_xy=tuple(d["base_xy"]),
            stroke_widths=tuple(d["stroke_widths"]),
            radius_px=d["radius_px"],
            stroke_px=d["stroke_px"],
            margin_px=d["margin_px"],
            clutter_shapes=d["clutter_shapes"],
            occluders=d["occluders"],
            max_retries=d["max_retries"],
        )


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the spatial augmentations.

    One of {rotation, padding, both} is chosen uniformly per call; rotation
    is about the image center, padding translates. ``radius_px`` and
    ``stroke_px`` control mask re-rasterization and default to the scale
    rule for the sample's resolution.
    """

    rotation_deg: float = 30.0
    pad_px: float = 8.0
    radius_px: float | None = None
    stroke_px: float | None = None


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def chain_points(base_xy, link_lengths, angles) -> np.ndarray:
    """Forward kinematics: joint positions of the chain, (8, 2)."""
    pts = np.empty((N_KEYPOINTS, 2), dtype=np.float64)
    pts[0] = base_xy
    heading = 0.0
    for i, (length, ang) in enumerate(zip(link_lengths, angles)):
        heading += ang
        pts[i + 1] = pts[i] + length * np.array(
            [math.cos(heading), math.sin(heading)])
    return pts


def _segment_distance(px, py, a, b):
    """Distance from grid points (px, py) to segment a-b (handles a == b)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def rasterize_masks(keypoints: KeypointSet, h: int, w: int,
                    radius_px: float, stroke_px: float) -> np.ndarray:
    """Rasterize the 9 annotation masks for a keypoint set.

    Channel c (0-7): pixels whose center lies within ``radius_px`` of
    keypoint c (skipped for invisible keypoints). Channel 8: pixels within
    ``stroke_px / 2`` of any segment joining consecutive keypoints.
    """
    if radius_px <= 0 or stroke_px <= 0:
        raise ContractViolation("radius_px and stroke_px must be positive")
    masks = np.zeros((9, h, w), dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    for c in range(N_KEYPOINTS):
        if not keypoints.visible[c]:
            continue
        kx, ky = keypoints.xy[c]
        x0 = max(0, int(math.floor(kx - radius_px)) - 1)
        x1 = min(w, int(math.ceil(kx + radius_px)) + 2)
        y0 = max(0, int(math.floor(ky - radius_px)) - 1)
        y1 = min(h, int(math.ceil(ky + radius_px)) + 2)
        if x0 >= x1 or y0 >= y1:
            continue
        d = np.hypot(xs[y0:y1, x0:x1] - kx, ys[y0:y1, x0:x1] - ky)
        masks[c, y0:y1, x0:x1] = (d <= radius_px).astype(np.float32)
    half = stroke_px / 2.0
    skel = np.zeros((h, w), dtype=bool)
    for i in range(N_LINKS):
        a = keypoints.xy[i].astype(np.float64)
        b = keypoints.xy[i + 1].astype(np.float64)
        lo_x = max(0, int(math.floor(min(a[0], b[0]) - half)) - 1)
        hi_x = min(w, int(math.ceil(max(a[0], b[0]) + half)) + 2)
        lo_y = max(0, int(math.floor(min(a[1], b[1]) - half)) - 1)
        hi_y = min(h, int(math.ceil(max(a[1], b[1]) + half)) + 2)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        d = _segment_distance(xs[lo_y:hi_y, lo_x:hi_x],
                              ys[lo_y:hi_y, lo_x:hi_x], a, b)
        skel[lo_y:hi_y, lo_x:hi_x] |= d <= half
    masks[8] = skel.astype(np.float32)
    return masks


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _render_image(config: ArmConfig, kps: np.ndarray,
                  rng: np.random.Generator):
    """Draw background clutter, the arm, and optional occluders.

    Returns (image (3,H,W), occluder_mask (H,W) bool).
    """
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.empty((3, h, w), dtype=np.float32)

    # background: directional gradient plus soft blobs and pixel noise
    gdir = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(gdir) * xs / w + np.sin(gdir) * ys / h).astype(np.float32)
    ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-6)
    for ch in range(3):
        lo, hi = sorted(rng.uniform(0.05, 0.45, 2))
        img[ch] = lo + (hi - lo) * ramp
    for _ in range(config.clutter_shapes):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.04, 0.18) * min(h, w)
        blob = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r)))
        tint = rng.uniform(-0.18, 0.18, 3).astype(np.float32)
        img += tint[:, None, None] * blob.astype(np.float32)
    img += rng.normal(0.0, 0.015, (3, h, w)).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)

    # arm links: bright metallic strokes, tapering width down the chain
    arm_color = np.array([0.85, 0.85, 0.88], np.float32) \
        + rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    for i in range(N_LINKS):
        half = config.stroke_widths[i] / 2.0
        a, b = kps[i], kps[i + 1]
        lo_x = max(0, int(min(a[0], b[0]) - half) - 2)
        hi_x = min(w, int(max(a[0], b[0]) + half) + 3)
        lo_y = max(0, int(min(a[1], b[1]) - half) - 2)
        hi_y = min(h, int(max(a[1], b[1]) + half) + 3)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        d = _segment_distance(xs[lo_y:hi_y, lo_x:hi_x],
                              ys[lo_y:hi_y, lo_x:hi_x], a, b)
        hit = d <= half
        shade = (1.0 - 0.05 * i)
        for ch in range(3):
            region = img[ch, lo_y:hi_y, lo_x:hi_x]
            region[hit] = arm_color[ch] * shade
    # joints: dark caps so joint centers are visually marked
    joint_color = np.array([0.25, 0.12, 0.10], np.float32)
    for i in range(N_KEYPOINTS):
        r = max(1.5, config.stroke_widths[min(i, N_LINKS - 1)] * 0.45)
        kx, ky = kps[i]
        lo_x = max(0, int(kx - r) - 1)
        hi_x = min(w, int(kx + r) + 2)
        lo_y = max(0, int(ky - r) - 1)
        hi_y = min(h, int(ky + r) + 2)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        d = np.hypot(xs[lo_y:hi_y, lo_x:hi_x] - kx, ys[lo_y:hi_y, lo_x:hi_x] - ky)
        hit = d <= r
        for ch in range(3):
            region = img[ch, lo_y:hi_y, lo_x:hi_x]
            region[hit] = joint_color[ch]

    occ_mask = np.zeros((h, w), dtype=bool)
    for _ in range(config.occluders):
        ow = rng.uniform(0.1, 0.3) * w
        oh = rng.uniform(0.1, 0.3) * h
        ox = rng.uniform(0, w - ow)
        oy = rng.uniform(0, h - oh)
        box = (xs >= ox) & (xs < ox + ow) & (ys >= oy) & (ys < oy + oh)
        color = rng.uniform(0.1, 0.6, 3).astype(np.float32)
        for ch in range(3):
            img[ch][box] = color[ch]
        occ_mask |= box
    return img, occ_mask


def _keypoints_in_frame(kps: np.ndarray, config: ArmConfig) -> bool:
    m = config.margin_px
    return bool(
        (kps[:, 0] >= m).all() and (kps[:, 0] <= config.width - 1 - m).all()
        and (kps[:, 1] >= m).all() and (kps[:, 1] <= config.height - 1 - m).all()
    )


def gen_scene(config: ArmConfig, seed: int) -> Sample:
    """Render one scene; deterministic per (config, seed).

    Joint angles are resampled until all keypoints land inside the frame;
    running out of retries raises GenerationError.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    for _ in range(config.max_retries):
        angles = [rng.uniform(lo, hi) for lo, hi in config.joint_ranges]
        kps = chain_points(config.base_xy, config.link_lengths, angles)
        if _keypoints_in_frame(kps, config):
            break
    else:
        raise GenerationError(
            f"no in-frame arm pose found in {config.max_retries} tries; "
            "loosen joint ranges or shorten links"
        )
    img, occ_mask = _render_image(config, kps, rng)
    visible = np.ones(N_KEYPOINTS, dtype=bool)
    if config.occluders:
        visible = ~_fully_occluded(kps, occ_mask, config.radius_px)
    keypoints = KeypointSet(kps, visible)
    masks = rasterize_masks(keypoints, config.height, config.width,
                            config.radius_px, config.stroke_px)
    return Sample(img, keypoints, masks)


def _fully_occluded(kps, occ_mask, radius_px) -> np.ndarray:
    """True where every pixel of the keypoint's disk is covered."""
    h, w = occ_mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros(len(kps), dtype=bool)
    for i, (kx, ky) in enumerate(kps):
        disk = np.hypot(xs - kx, ys - ky) <= radius_px
        if disk.any():
            out[i] = bool(occ_mask[disk].all())
    return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _warp_image_nearest(image: np.ndarray, inv_map) -> np.ndarray:
    """Resample (3, H, W) image through an inverse coordinate map."""
    _, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx, sy = inv_map(xs.astype(np.float64), ys.astype(np.float64))
    sxi = np.rint(sx).astype(np.intp)
    syi = np.rint(sy).astype(np.intp)
    valid = (sxi >= 0) & (sxi < w) & (syi >= 0) & (syi < h)
    sxi = np.clip(sxi, 0, w - 1)
    syi = np.clip(syi, 0, h - 1)
    out = image[:, syi, sxi]
    out[:, ~valid] = 0.0
    return np.ascontiguousarray(out)


def augment(sample: Sample, seed: int, params: AugmentParams):
    """Apply one random spatial transform; None signals rejection.

    Picks uniformly among rotation-only, padding-only, and both. Keypoints
    are mapped with the same transform and the masks are re-rasterized from
    the new points (never warped as images). If any previously visible
    keypoint leaves the frame, the augmentation is rejected.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    mode = rng.integers(0, 3)  # 0 rotate, 1 pad, 2 both
    angle = 0.0
    shift = np.zeros(2)
    if mode in (0, 2):
        angle = math.radians(rng.uniform(-params.rotation_deg,
                                         params.rotation_deg))
    if mode in (1, 2):
        shift = rng.uniform(-params.pad_px, params.pad_px, 2)

    h, w = sample.height, sample.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos_a, sin_a = math.cos(angle), math.sin(angle)

    def fwd(xy):
        rel = xy - [cx, cy]
        rot = np.column_stack([
            cos_a * rel[:, 0] - sin_a * rel[:, 1],
            sin_a * rel[:, 0] + cos_a * rel[:, 1],
        ])
        return rot + [cx, cy] + shift

    new_xy = fwd(sample.keypoints.xy.astype(np.float64))
    vis = sample.keypoints.visible
    inside = (
        (new_xy[:, 0] >= 0) & (new_xy[:, 0] <= w - 1)
        & (new_xy[:, 1] >= 0) & (new_xy[:, 1] <= h - 1)
    )
    if not inside[vis].all():
        return None

    def inv(px, py):
        ux = px - cx - shift[0]
        uy = py - cy - shift[1]
        return (cos_a * ux + sin_a * uy + cx,
                -sin_a * ux + cos_a * uy + cy)

    image = _warp_image_nearest(sample.image, inv)
    keypoints = KeypointSet(new_xy, vis.copy())
    radius = params.radius_px if params.radius_px is not None \
        else scaled_radius(h, w)
    stroke = params.stroke_px if params.stroke_px is not None \
        else scaled_stroke(h, w)
    masks = rasterize_masks(keypoints, h, w, radius, stroke)
    return Sample(image, keypoints, masks)


# ---------------------------------------------------------------------------
# Dataset assembly and on-disk format
# ---------------------------------------------------------------------------

def build_dataset(config: ArmConfig, n_base: int, val_fraction: float,
                  augment_per_image: int, seed: int,
                  params: AugmentParams | None = None):
    """Generate, split, then augment only the training side.

    Returns (train, val) lists of Samples. The split happens before
    augmentation, so the validation set is identical for any
    ``augment_per_image``. Rejected augmentations are resampled until each
    base image has contributed its quota.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ContractViolation("val_fraction must be in (0, 1)")
    if params is None:
        params = AugmentParams(radius_px=config.radius_px,
                               stroke_px=config.stroke_px)
    base = [gen_scene(config, _child_seed(seed, "scene", i))
            for i in range(n_base)]
    order = np.random.default_rng(
        np.random.SeedSequence([seed, _tag("split")])).permutation(n_base)
    n_val = int(round(val_fraction * n_base))
    val = [base[i] for i in order[:n_val]]
    train = [base[i] for i in order[n_val:]]
    augmented = []
    for bi, sample in enumerate(train):
        produced = 0
        attempt = 0
        while produced < augment_per_image:
            if attempt >= 1000:
                raise GenerationError(
                    f"augmentation of training image {bi} rejected 1000 times"
                )
            out = augment(sample, _child_seed(seed, "augment", bi, attempt),
                          params)
            attempt += 1
            if out is not None:
                augmented.append(out)
                produced += 1
    return train + augmented, val


def _tag(name: str) -> int:
    return int.from_bytes(name.encode(), "big")


def _child_seed(seed: int, name: str, *indices: int) -> int:
    ss = np.random.SeedSequence([seed, _tag(name), *indices])
    return int(ss.generate_state(1)[0])


# -- PPM (P6) image files: dependency-free lossless 8-bit raster -----------

def write_ppm(path, image: np.ndarray):
    """Store a (3, H, W) float image in [0, 1] as binary PPM."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back to (3, H, W) float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ContractViolation(f"{path}: not a binary PPM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractViolation(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after header
    pix = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_dataset(directory, train, val, config: ArmConfig):
    """Write images plus per-split JSON annotations.

    Masks are not stored; loaders re-rasterize them from the keypoints
    using the radii recorded in the annotation files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, samples in (("train", train), ("val", val)):
        entries = []
        for i, sample in enumerate(samples):
            name = f"{split}_{i:05d}.ppm"
            write_ppm(directory / name, sample.image)
            entries.append({
                "image": name,
                "keypoints": [
                    [float(x), float(y), bool(v)]
                    for (x, y), v in zip(sample.keypoints.xy,
                                         sample.keypoints.visible)
                ],
            })
        payload = {
            "radius_px": config.radius_px,
            "stroke_px": config.stroke_px,
            "height": config.height,
            "width": config.width,
            "samples": entries,
            "config": config.to_dict(),
        }
        with open(directory / f"{split}.json", "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_dataset(directory):
    """Load (train, val, config) from a dataset directory."""
    directory = Path(directory)
    splits = []
    config = None
    for split in ("train", "val"):
        with open(directory / f"{split}.json") as fh:
            payload = json.load(fh)
        if config is None:
            config = ArmConfig.from_dict(payload["config"])
        samples = []
        for entry in payload["samples"]:
            image = read_ppm(directory / entry["image"])
            kp = np.array([[x, y] for x, y, _ in entry["keypoints"]],
                          dtype=np.float32)
            vis = np.array([v for _, _, v in entry["keypoints"]], dtype=bool)
            keypoints = KeypointSet(kp, vis)
            masks = rasterize_masks(keypoints, payload["height"],
                                    payload["width"], payload["radius_px"],
                                    payload["stroke_px"])
            samples.append(Sample(image, keypoints, masks))
        splits.append(samples)
    return splits[0], splits[1], config
