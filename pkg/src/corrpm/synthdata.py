"""Procedural stick-figure parsing samples, augmentation and on-disk datasets.

Each figure is a torso capsule with a round head, two arms and two legs.
Left/right follow the figure's own side, so the figure's left limbs sit on
the image's right. Sleeves and trousers often share the torso colour, which
leaves adjacent parts separable only by shape and position.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from corrpm import cpmt
from corrpm.supervision import Keypoint, derive_edges

PART_NAMES = ("background", "head", "torso", "left-arm", "right-arm", "left-leg", "right-leg")
KEYPOINT_NAMES = ("head", "left-hand", "right-hand", "left-foot", "right-foot")
KEYPOINT_PARTS = (1, 3, 4, 5, 6)
LABEL_FLIP = np.array([0, 1, 2, 4, 3, 6, 5], dtype=np.uint8)
KEYPOINT_FLIP = (0, 2, 1, 4, 3)

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    canvas: tuple[int, int] = (64, 64)
    q: int = 7
    j: int = 5
    noise: float = 0.06
    arm_angle_range: tuple[float, float] = (15.0, 150.0)
    leg_angle_range: tuple[float, float] = (0.0, 35.0)

    def __post_init__(self):
        m, n = self.canvas
        if m % 16 or n % 16 or m < 32 or n < 32:
            raise ValueError(f"canvas {self.canvas} must be at least 32 and divisible by 16")
        if self.q != len(PART_NAMES):
            raise ValueError(f"the figure model has exactly {len(PART_NAMES)} part classes, got q={self.q}")
        if not 1 <= self.j <= len(KEYPOINT_NAMES):
            raise ValueError(f"j must be between 1 and {len(KEYPOINT_NAMES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(eq=False)
class SampleRecord:
    image: np.ndarray  # (3, M, N) float64 in [0, 1]
    mask: np.ndarray  # (M, N) uint8 part labels
    keypoints: tuple[Keypoint, ...]
    edges: np.ndarray  # (M, N) uint8
    seed: int = 0
    meta: dict = field(default_factory=dict)


def samples_equal(a: SampleRecord, b: SampleRecord) -> bool:
    return (
        a.seed == b.seed
        and a.image.shape == b.image.shape
        and np.array_equal(a.image, b.image)
        and np.array_equal(a.mask, b.mask)
        and np.array_equal(a.edges, b.edges)
        and tuple(a.keypoints) == tuple(b.keypoints)
    )


def keypoint_pixel(p: Keypoint) -> tuple[int, int]:
    """(row, col) of the pixel whose centre is nearest to the keypoint."""
    return int(math.floor(p.y + 0.5)), int(math.floor(p.x + 0.5))


def _quantize(v: float) -> float:
    # dyadic coordinates keep mirror arithmetic exact; avoid half-pixel ties
    q = round(v * 16) / 16
    if q - math.floor(q) == 0.5:
        q += 1 / 16
    return q


def _capsule(shape, p0, p1, radius) -> np.ndarray:
    m, n = shape
    ys, xs = np.mgrid[0:m, 0:n].astype(np.float64)
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0) if length2 > 0 else 0.0
    return (xs - x0 - t * dx) ** 2 + (ys - y0 - t * dy) ** 2 <= radius * radius


def _draw_figure(cfg: GeneratorConfig, rng: np.random.Generator):
    m, n = cfg.canvas
    s = min(m, n) / 56.0
    torso_len = rng.uniform(13, 17) * s
    torso_r = rng.uniform(4.5, 6.0) * s
    head_r = rng.uniform(4.0, 5.0) * s
    neck = (rng.uniform(0.42, 0.58) * (n - 1), rng.uniform(11.5, 13.5) * s)
    pelvis = (neck[0] + rng.uniform(-2, 2) * s, neck[1] + torso_len)
    head_c = (neck[0] + rng.uniform(-1, 1) * s, neck[1] - head_r - 0.5 * s)

    limbs = {}
    for label, side in ((3, 1.0), (4, -1.0)):
        ang = math.radians(rng.uniform(*cfg.arm_angle_range))
        length = rng.uniform(11, 16) * s
        shoulder = (neck[0] + side * 0.8 * torso_r, neck[1] + 2.0 * s)
        hand = (shoulder[0] + side * length * math.sin(ang), shoulder[1] + length * math.cos(ang))
        limbs[label] = (shoulder, hand, rng.uniform(2.0, 2.8) * s)
    for label, side in ((5, 1.0), (6, -1.0)):
        ang = math.radians(rng.uniform(*cfg.leg_angle_range))
        length = rng.uniform(14, 19) * s
        hip = (pelvis[0] + side * 0.5 * torso_r, pelvis[1])
        foot = (hip[0] + side * length * math.sin(ang), hip[1] + length * math.cos(ang))
        limbs[label] = (hip, foot, rng.uniform(2.4, 3.3) * s)

    mask = np.zeros((m, n), dtype=np.uint8)
    mask[_capsule((m, n), neck, pelvis, torso_r)] = 2
    for label in (5, 6, 3, 4):
        p0, p1, r = limbs[label]
        mask[_capsule((m, n), p0, p1, r)] = label
    mask[_capsule((m, n), head_c, head_c, head_r)] = 1

    ends = {1: head_c, 3: limbs[3][1], 4: limbs[4][1], 5: limbs[5][1], 6: limbs[6][1]}
    keypoints = tuple(
        Keypoint(_quantize(ends[part][0]), _quantize(ends[part][1]), True) for part in KEYPOINT_PARTS[: cfg.j]
    )
    return mask, keypoints


def _valid(mask: np.ndarray, keypoints, cfg: GeneratorConfig) -> bool:
    m, n = mask.shape
    counts = np.bincount(mask.ravel(), minlength=cfg.q)
    if np.any(counts[1:] < 4):
        return False
    for p, part in zip(keypoints, KEYPOINT_PARTS):
        r, c = keypoint_pixel(p)
        if not (0 <= r < m and 0 <= c < n and mask[r, c] == part):
            return False
    return True


def _paint(mask: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    shirt = rng.uniform(0.1, 0.9, size=3)
    trousers = shirt + rng.normal(0, 0.04, size=3) if rng.random() < 0.5 else rng.uniform(0.1, 0.9, size=3)
    sleeves = shirt if rng.random() < 0.5 else skin
    background = rng.uniform(0.0, 1.0, size=3)
    palette = np.stack([background, skin, shirt, sleeves, sleeves, trousers, trousers])
    image = palette[mask].transpose(2, 0, 1)
    image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate(cfg: GeneratorConfig, seed: int) -> SampleRecord:
    """Deterministic sample for ``(cfg, seed)``; bad geometry is redrawn internally."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        mask, keypoints = _draw_figure(cfg, rng)
        if _valid(mask, keypoints, cfg):
            break
    else:  # pragma: no cover - the ranges above make this unreachable in practice
        raise RuntimeError(f"could not draw a valid figure for seed {seed}")
    image = _paint(mask, cfg, rng)
    return SampleRecord(image=image, mask=mask, keypoints=keypoints, edges=derive_edges(mask), seed=seed)


def generate_many(cfg: GeneratorConfig, seeds) -> list[SampleRecord]:
    return [generate(cfg, int(s)) for s in seeds]


# ---------------------------------------------------------------- augmentation


def transform_point(x: float, y: float, shape, angle: float, flip: bool, scale: float) -> tuple[float, float]:
    """Forward map of the augmentation about the canvas centre."""
    m, n = shape
    cx, cy = (n - 1) / 2.0, (m - 1) / 2.0
    if angle == 0 and scale == 1:
        return ((n - 1) - x if flip else x), y
    u, v = x - cx, y - cy
    if flip:
        u = -u
    t = math.radians(angle)
    ct, st = math.cos(t), math.sin(t)
    return cx + scale * (ct * u - st * v), cy + scale * (st * u + ct * v)


def apply_transform(sample: SampleRecord, angle: float, flip: bool, scale: float) -> SampleRecord:
    """Rotate (degrees), optionally mirror, and rescale a sample consistently."""
    m, n = sample.mask.shape
    if angle == 0 and scale == 1:
        image = sample.image[:, :, ::-1].copy() if flip else sample.image.copy()
        mask = sample.mask[:, ::-1].copy() if flip else sample.mask.copy()
    else:
        cx, cy = (n - 1) / 2.0, (m - 1) / 2.0
        t = math.radians(angle)
        ct, st = math.cos(t), math.sin(t)
        ys, xs = np.mgrid[0:m, 0:n].astype(np.float64)
        u, v = (xs - cx) / scale, (ys - cy) / scale
        su, sv = ct * u + st * v, -st * u + ct * v
        if flip:
            su = -su
        coords = np.stack([sv + cy, su + cx])
        image = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in sample.image])
        mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0).astype(np.uint8)

    keypoints = []
    for p in sample.keypoints:
        x, y = transform_point(p.x, p.y, (m, n), angle, flip, scale)
        keypoints.append(Keypoint(x, y, p.visible))
    if flip:
        mask = LABEL_FLIP[mask]
        order = [i for i in KEYPOINT_FLIP if i < len(keypoints)]
        keypoints = [keypoints[i] for i in order] if len(order) == len(keypoints) else keypoints

    checked = []
    for p, part in zip(keypoints, KEYPOINT_PARTS):
        r, c = keypoint_pixel(p)
        inside = 0 <= r < m and 0 <= c < n and mask[r, c] == part
        checked.append(Keypoint(p.x, p.y, p.visible and inside))
    return SampleRecord(
        image=image, mask=mask, keypoints=tuple(checked), edges=derive_edges(mask), seed=sample.seed,
        meta={**sample.meta, "augment": {"angle": angle, "flip": flip, "scale": scale}},
    )


def augment(sample: SampleRecord, seed: int) -> SampleRecord:
    """Random rotation in [-60, 60] degrees, mirror with p=0.5, scale in [0.75, 1.25]."""
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(-60.0, 60.0))
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.75, 1.25))
    return apply_transform(sample, angle, flip, scale)


# ---------------------------------------------------------------- disk format


def _pgm_bytes(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype=np.uint8)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode() + grid.tobytes()


def _read_pgm(data: bytes, source: str) -> np.ndarray:
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{source}: truncated PGM header at offset {pos}")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise DatasetError(f"{source}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    if len(data) - pos != w * h:
        raise DatasetError(f"{source}: expected {w * h} pixel bytes at offset {pos}, found {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def _keypoints_csv(points) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "x", "y", "visible"])
    for i, p in enumerate(points):
        writer.writerow([i, repr(float(p.x)), repr(float(p.y)), int(p.visible)])
    return buf.getvalue().encode()


def _read_keypoints(data: bytes, source: str) -> tuple[Keypoint, ...]:
    rows = list(csv.reader(io.StringIO(data.decode())))
    if not rows or rows[0] != ["index", "x", "y", "visible"]:
        raise DatasetError(f"{source}: missing keypoint header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4 or int(row[0]) != lineno - 2:
            raise DatasetError(f"{source}:{lineno}: malformed keypoint row")
        out.append(Keypoint(float(row[1]), float(row[2]), bool(int(row[3]))))
    return tuple(out)


def write_dataset(samples, directory, config: GeneratorConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}"
        sub = directory / name
        sub.mkdir(exist_ok=True)
        files = {
            "image.cpmt": cpmt.encode(s.image),
            "mask.pgm": _pgm_bytes(s.mask),
            "edges.pgm": _pgm_bytes(s.edges),
            "keypoints.csv": _keypoints_csv(s.keypoints),
        }
        for fname, payload in files.items():
            (sub / fname).write_bytes(payload)
        entries.append({
            "name": name,
            "seed": int(s.seed),
            "sha256": {fname: hashlib.sha256(payload).hexdigest() for fname, payload in files.items()},
        })
    manifest = {
        "version": FORMAT_VERSION,
        "config": config.to_dict() if config else None,
        "count": len(entries),
        "samples": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != FORMAT_VERSION or not isinstance(manifest.get("samples"), list):
        raise DatasetError(f"{path}: unsupported or malformed manifest")
    if manifest.get("count") != len(manifest["samples"]):
        raise DatasetError(f"{path}: count field disagrees with sample list")
    return manifest


def read_dataset(directory) -> list[SampleRecord]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = []
    for entry in manifest["samples"]:
        sub = directory / entry["name"]
        payload = {}
        for fname, digest in entry["sha256"].items():
            path = sub / fname
            try:
                data = path.read_bytes()
            except OSError as exc:
                raise DatasetError(f"{path}: missing file") from exc
            if hashlib.sha256(data).hexdigest() != digest:
                raise DatasetError(f"{path}: checksum mismatch ({len(data)} bytes read)")
            payload[fname] = data
        try:
            image = cpmt.decode(payload["image.cpmt"], str(sub / "image.cpmt"))
        except cpmt.FormatError as exc:
            raise DatasetError(str(exc)) from exc
        mask = _read_pgm(payload["mask.pgm"], str(sub / "mask.pgm"))
        edges = _read_pgm(payload["edges.pgm"], str(sub / "edges.pgm"))
        keypoints = _read_keypoints(payload["keypoints.csv"], str(sub / "keypoints.csv"))
        out.append(SampleRecord(image=image, mask=mask, keypoints=keypoints, edges=edges, seed=int(entry["seed"])))
    return out


def dataset_config(directory) -> GeneratorConfig | None:
    cfg = read_manifest(directory).get("config")
    return GeneratorConfig.from_dict(cfg) if cfg else None
