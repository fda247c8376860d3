"""Datasets and persistence.

Covers COCO keypoint-JSON ingestion, a deterministic stick-figure
generator whose poses deliberately park extremities on the tight box
border (so that inaccurate proposals crop them), horizontal-flip
augmentation, a minimal binary PPM reader for real-image mode, and a
versioned binary container used for image blobs and checkpoints.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DataError, ShapeError
from .geometry import Box
from .keypoints import FLIP_PAIRS, NUM_KEYPOINTS, SKELETON, KeypointSet


@dataclass(frozen=True)
class Annotation:
    box: Box
    keypoints: KeypointSet
    area: float


@dataclass
class ImageRecord:
    image_id: int
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    annotations: list

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


# ---------------------------------------------------------------------------
# COCO keypoint JSON
# ---------------------------------------------------------------------------

def _require(obj, key, path, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"missing field at {path}.{key}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise DataError(f"wrong type at {path}.{key}: expected {kind.__name__}")
    return value


def load_coco_json(path, images_dir=None):
    """Read the COCO person-keypoints schema into ImageRecords.

    Annotations with num_keypoints == 0 and non-person categories are
    dropped; bbox xywh becomes x1y1x2y2. Pixels come from a sibling .ppm
    file when images_dir is given, otherwise zero tensors of the declared
    size.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            root = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse COCO json {path}: {exc}") from exc
    if not isinstance(root, dict):
        raise DataError("$: COCO file must be a JSON object")
    images = _require(root, "images", "$", list)
    annotations = _require(root, "annotations", "$", list)
    person_ids = {1}
    if "categories" in root:
        person_ids = {c.get("id") for c in root["categories"]
                      if isinstance(c, dict) and c.get("name") == "person"}
    meta = {}
    for i, entry in enumerate(images):
        img_id = _require(entry, "id", f"$.images[{i}]")
        width = _require(entry, "width", f"$.images[{i}]", int)
        height = _require(entry, "height", f"$.images[{i}]", int)
        meta[img_id] = (width, height, entry.get("file_name"))
    per_image = {img_id: [] for img_id in meta}
    for i, ann in enumerate(annotations):
        path_i = f"$.annotations[{i}]"
        img_id = _require(ann, "image_id", path_i)
        if img_id not in meta:
            raise DataError(f"{path_i}.image_id: unknown image {img_id}")
        if ann.get("category_id", 1) not in person_ids:
            continue
        flat = _require(ann, "keypoints", path_i, list)
        if len(flat) != NUM_KEYPOINTS * 3:
            raise DataError(
                f"{path_i}.keypoints: expected {NUM_KEYPOINTS * 3} numbers, "
                f"got {len(flat)}")
        kps = KeypointSet.from_flat(flat)
        n_labeled = ann.get("num_keypoints", int((kps.vis > 0).sum()))
        if n_labeled == 0:
            continue
        bbox = _require(ann, "bbox", path_i, list)
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise DataError(f"{path_i}.bbox: expected positive xywh, got {bbox}")
        x, y, w, h = (float(v) for v in bbox)
        img_w, img_h = meta[img_id][0], meta[img_id][1]
        if x + w <= 0 or y + h <= 0 or x >= img_w or y >= img_h:
            raise DataError(
                f"{path_i}.bbox: box does not intersect the {img_w}x{img_h} "
                f"image")
        area = float(ann.get("area", w * h))
        per_image[img_id].append(
            Annotation(Box(x, y, x + w, y + h), kps, area))
    records = []
    for img_id in sorted(meta):
        width, height, file_name = meta[img_id]
        pixels = None
        if images_dir is not None and file_name:
            candidate = f"{images_dir}/{file_name}"
            try:
                pixels = read_ppm(candidate)
            except FileNotFoundError:
                pixels = None
        if pixels is None:
            pixels = np.zeros((3, height, width))
        records.append(ImageRecord(img_id, pixels, per_image[img_id]))
    return records


def read_ppm(path):
    """Minimal binary PPM (P6, maxval <= 255) reader -> (3, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PPM not supported")
    pos += 1  # single whitespace after maxval
    raw = blob[pos:pos + width * height * 3]
    if len(raw) != width * height * 3:
        raise DataError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / float(maxval)


def write_ppm(path, pixels):
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"write_ppm: expected (3, H, W), got {arr.shape}")
    h, w = arr.shape[1:]
    data = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# synthetic stick figures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 200
    image_size: tuple = (128, 128)  # (width, height)
    persons_min: int = 1
    persons_max: int = 3
    scale_mix: tuple = (0.35, 0.5, 0.15)  # small / medium / large
    limb_thickness: float = 2.0
    edge_keypoint_bias: float = 0.5
    occlusion_probability: float = 0.08
    seed: int = 0

    def __post_init__(self):
        w, h = self.image_size
        if w < 32 or h < 32:
            raise ShapeError(f"SynthConfig: image_size too small: {self.image_size}")
        if not (1 <= self.persons_min <= self.persons_max):
            raise ShapeError("SynthConfig: bad persons range")
        probs = [self.edge_keypoint_bias, self.occlusion_probability,
                 *self.scale_mix]
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ShapeError("SynthConfig: probabilities must lie in [0, 1]")
        if abs(sum(self.scale_mix) - 1.0) > 1e-9:
            raise ShapeError("SynthConfig: scale_mix must sum to 1")
        if self.limb_thickness <= 0:
            raise ShapeError("SynthConfig: limb_thickness must be positive")


# figure height as a fraction of the short image side, per scale bucket
_SCALE_RANGES = ((0.15, 0.26), (0.40, 0.70), (0.85, 0.97))

# palette per skeleton edge (left limbs cool, right limbs warm)
_EDGE_COLORS = (
    (0.20, 0.55, 1.00), (0.10, 0.85, 0.75),  # left leg
    (1.00, 0.45, 0.15), (1.00, 0.75, 0.10),  # right leg
    (0.60, 0.60, 0.60),                       # pelvis
    (0.35, 0.70, 0.35), (0.80, 0.50, 0.50),  # torso sides
    (0.65, 0.65, 0.65),                       # shoulders
    (0.25, 0.35, 0.95), (0.95, 0.25, 0.30),  # upper arms
    (0.30, 0.80, 0.95), (0.95, 0.55, 0.60),  # forearms
    (0.90, 0.90, 0.40),                       # eye-eye
    (0.90, 0.80, 0.30), (0.95, 0.85, 0.35),  # nose-eyes
    (0.45, 0.60, 0.90), (0.90, 0.60, 0.45),  # eye-ears
)

_LEFT_TINT = (0.35, 0.65, 1.00)
_RIGHT_TINT = (1.00, 0.50, 0.30)


def _sample_pose(rng, edge_pose):
    """17 joint positions (unit torso) for one figure, y pointing down."""
    deg = math.pi / 180.0
    pts = np.zeros((NUM_KEYPOINTS, 2))
    pts[0] = (0.0, -1.35)                       # nose
    pts[1], pts[2] = (-0.08, -1.46), (0.08, -1.46)  # eyes
    pts[3], pts[4] = (-0.17, -1.38), (0.17, -1.38)  # ears
    pts[5], pts[6] = (-0.30, -1.0), (0.30, -1.0)    # shoulders
    pts[11], pts[12] = (-0.20, 0.0), (0.20, 0.0)    # hips
    if edge_pose:
        sh = rng.uniform(75, 125, size=2) * deg
        bend = rng.uniform(-10, 15, size=2) * deg
        hip = rng.uniform(22, 45, size=2) * deg
        knee = rng.uniform(-5, 5, size=2) * deg
    else:
        sh = rng.uniform(5, 30, size=2) * deg
        bend = rng.uniform(5, 50, size=2) * deg
        hip = rng.uniform(4, 14, size=2) * deg
        knee = rng.uniform(0, 20, size=2) * deg
    for side, sgn in ((0, -1.0), (1, 1.0)):
        shoulder = pts[5 + side]
        elbow = shoulder + 0.55 * np.array([sgn * math.sin(sh[side]),
                                            math.cos(sh[side])])
        wrist = elbow + 0.50 * np.array([sgn * math.sin(sh[side] + bend[side]),
                                         math.cos(sh[side] + bend[side])])
        pts[7 + side] = elbow
        pts[9 + side] = wrist
        hip_pt = pts[11 + side]
        knee_pt = hip_pt + 0.65 * np.array([sgn * math.sin(hip[side]),
                                            math.cos(hip[side])])
        ankle = knee_pt + 0.60 * np.array([sgn * math.sin(hip[side] - knee[side]),
                                           math.cos(hip[side] - knee[side])])
        pts[13 + side] = knee_pt
        pts[15 + side] = ankle
    return pts


def _disc(pixels, cx, cy, radius, color):
    _, img_h, img_w = pixels.shape
    x0 = max(int(math.floor(cx - radius)), 0)
    x1 = min(int(math.ceil(cx + radius)) + 1, img_w)
    y0 = max(int(math.floor(cy - radius)), 0)
    y1 = min(int(math.ceil(cy + radius)) + 1, img_h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= radius ** 2
    for c in range(3):
        pixels[c, y0:y1, x0:x1][mask] = color[c]


def _segment(pixels, p0, p1, radius, color):
    _, img_h, img_w = pixels.shape
    x0 = max(int(math.floor(min(p0[0], p1[0]) - radius)), 0)
    x1 = min(int(math.ceil(max(p0[0], p1[0]) + radius)) + 1, img_w)
    y0 = max(int(math.floor(min(p0[1], p1[1]) - radius)), 0)
    y1 = min(int(math.ceil(max(p0[1], p1[1]) + radius)) + 1, img_h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs + 0.5 - p0[0]
    py = ys + 0.5 - p0[1]
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = dx * dx + dy * dy
    t = np.clip((px * dx + py * dy) / norm2, 0.0, 1.0) if norm2 > 0 else 0.0
    dist2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    mask = dist2 <= radius ** 2
    for c in range(3):
        pixels[c, y0:y1, x0:x1][mask] = color[c]


def _render_figure(pixels, kps, thickness):
    radius = thickness / 2.0
    for edge_idx, (a, b) in enumerate(SKELETON):
        if kps.vis[a] == 2 and kps.vis[b] == 2:
            _segment(pixels, kps.xy[a], kps.xy[b], radius,
                     _EDGE_COLORS[edge_idx])
    for k in (9, 10, 15, 16):  # wrist / ankle end blobs
        if kps.vis[k] == 2:
            tint = _LEFT_TINT if k % 2 == 1 else _RIGHT_TINT
            _disc(pixels, kps.xy[k, 0], kps.xy[k, 1], radius * 1.6, tint)
    if kps.vis[0] == 2:  # head blob around the nose
        _disc(pixels, kps.xy[0, 0], kps.xy[0, 1], radius * 2.2,
              (0.92, 0.88, 0.45))


def synth_generate(config):
    """Render a deterministic multi-person stick-figure dataset."""
    rng = np.random.default_rng(config.seed)
    img_w, img_h = config.image_size
    short_side = min(img_w, img_h)
    records = []
    for image_id in range(config.n_images):
        pixels = np.zeros((3, img_h, img_w))
        annotations = []
        n_persons = int(rng.integers(config.persons_min, config.persons_max + 1))
        for _ in range(n_persons):
            bucket = int(rng.choice(3, p=config.scale_mix))
            lo, hi = _SCALE_RANGES[bucket]
            target_h = rng.uniform(lo, hi) * short_side
            edge_pose = bool(rng.uniform() < config.edge_keypoint_bias)
            pts = _sample_pose(rng, edge_pose)
            raw_h = pts[:, 1].max() - pts[:, 1].min()
            raw_w = pts[:, 0].max() - pts[:, 0].min()
            s = target_h / raw_h
            fig_w = raw_w * s
            margin = config.limb_thickness + 1.0
            max_x0 = img_w - fig_w - margin
            max_y0 = img_h - target_h - margin
            if max_x0 <= margin or max_y0 <= margin:
                s = min((img_w - 2 * margin) / raw_w,
                        (img_h - 2 * margin) / raw_h)
                fig_w, target_h = raw_w * s, raw_h * s
                max_x0 = img_w - fig_w - margin
                max_y0 = img_h - target_h - margin
            x0 = rng.uniform(margin, max(max_x0, margin))
            y0 = rng.uniform(margin, max(max_y0, margin))
            xy = (pts - pts.min(axis=0)) * s + np.array([x0, y0])
            xy = np.round(xy * 8.0) / 8.0  # 1/8-px grid keeps flips exact
            vis = np.full(NUM_KEYPOINTS, 2, dtype=np.int64)
            occ = rng.uniform(size=NUM_KEYPOINTS) < config.occlusion_probability
            drop = rng.uniform(size=NUM_KEYPOINTS) < 0.25
            vis[occ] = 1
            vis[occ & drop] = 0
            if not (vis > 0).any():
                vis[0] = 2
            xy[vis == 0] = 0.0
            kps = KeypointSet(xy=xy, score=(vis > 0).astype(np.float64), vis=vis)
            # limb width tracks figure size so scales look self-similar
            thickness = max(1.2, config.limb_thickness * target_h / 64.0)
            _render_figure(pixels, kps, thickness)
            labeled_xy = xy[vis > 0]
            bx1, by1 = labeled_xy.min(axis=0)
            bx2, by2 = labeled_xy.max(axis=0)
            if bx2 - bx1 < 2.0:
                cx = 0.5 * (bx1 + bx2)
                bx1, bx2 = cx - 1.0, cx + 1.0
            if by2 - by1 < 2.0:
                cy = 0.5 * (by1 + by2)
                by1, by2 = cy - 1.0, cy + 1.0
            box = Box(bx1, by1, bx2, by2)
            annotations.append(Annotation(box, kps, box.area))
        records.append(ImageRecord(image_id, pixels, annotations))
    return records


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def flip_record(record):
    """Mirror pixels, boxes, and keypoints; swap left/right channels."""
    width = float(record.width)
    pixels = np.ascontiguousarray(record.pixels[:, :, ::-1])
    perm = np.arange(NUM_KEYPOINTS)
    for left, right in FLIP_PAIRS:
        perm[left], perm[right] = right, left
    annotations = []
    for ann in record.annotations:
        xy = ann.keypoints.xy.copy()
        xy[:, 0] = width - xy[:, 0]
        kps = KeypointSet(xy=xy[perm], score=ann.keypoints.score[perm],
                          vis=ann.keypoints.vis[perm])
        box = Box(width - ann.box.x2, ann.box.y1, width - ann.box.x1,
                  ann.box.y2, ann.box.score)
        annotations.append(Annotation(box, kps, ann.area))
    return ImageRecord(record.image_id, pixels, annotations)


def augment(record, flip_probability, rng):
    if not (0.0 <= flip_probability <= 1.0):
        raise ShapeError(
            f"augment: flip_probability must be in [0, 1], got {flip_probability}")
    if rng.uniform() < flip_probability:
        return flip_record(record)
    return record


# ---------------------------------------------------------------------------
# binary tensor container, checkpoints, dataset directories
# ---------------------------------------------------------------------------

_MAGIC = b"POSEREFINE-TENSORS 1\n"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


def save_tensors(path, meta, tensors):
    """Versioned container: magic line, JSON header, raw float64 blobs."""
    names = list(tensors)
    header = json.dumps(
        {"meta": meta, "tensors": [
            {"name": n, "shape": list(np.asarray(tensors[n]).shape)}
            for n in names]},
        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype=np.float64).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(
                f"{path}: not a poserefine tensor container (bad magic)")
        size_raw = fh.read(8)
        if len(size_raw) != 8:
            raise CheckpointError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", size_raw)
        header_raw = fh.read(header_len)
        if len(header_raw) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape)) * 8 if shape else 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(
                    f"{path}: truncated payload for tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return header["meta"], tensors


@dataclass
class Checkpoint:
    iteration: int
    config: dict
    weights: dict
    optimizer: dict = field(default_factory=dict)


def save_checkpoint(path, checkpoint):
    meta = {"kind": "checkpoint", "version": CHECKPOINT_VERSION,
            "iteration": int(checkpoint.iteration),
            "config": checkpoint.config}
    tensors = {}
    for name in sorted(checkpoint.weights):
        tensors[f"w/{name}"] = checkpoint.weights[name]
    for name in sorted(checkpoint.optimizer):
        tensors[f"opt/{name}"] = checkpoint.optimizer[name]
    save_tensors(path, meta, tensors)


def load_checkpoint(path):
    meta, tensors = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container is not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')} != "
            f"{CHECKPOINT_VERSION}")
    weights = {n[2:]: a for n, a in tensors.items() if n.startswith("w/")}
    optimizer = {n[4:]: a for n, a in tensors.items() if n.startswith("opt/")}
    return Checkpoint(iteration=int(meta["iteration"]), config=meta["config"],
                      weights=weights, optimizer=optimizer)


def save_dataset(directory, records, config_meta=None):
    """Write manifest.json + images.bin into an existing directory."""
    entries = []
    tensors = {}
    for rec in records:
        tname = f"img_{rec.image_id:06d}"
        tensors[tname] = rec.pixels
        entries.append({
            "id": rec.image_id,
            "width": rec.width,
            "height": rec.height,
            "tensor": tname,
            "annotations": [{
                "bbox_xyxy": list(a.box.as_xyxy()),
                "score": a.box.score,
                "keypoints": list(a.keypoints.to_flat()),
                "area": a.area,
            } for a in rec.annotations],
        })
    manifest = {"format": "poserefine-dataset", "version": DATASET_VERSION,
                "config": config_meta or {}, "images": entries}
    blob = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    with open(f"{directory}/manifest.json", "wb") as fh:
        fh.write(blob)
    save_tensors(f"{directory}/images.bin", {"kind": "dataset-images"}, tensors)


def load_dataset(directory):
    try:
        with open(f"{directory}/manifest.json", "rb") as fh:
            manifest = json.loads(fh.read().decode("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    if manifest.get("format") != "poserefine-dataset":
        raise DataError(f"{directory}: not a poserefine dataset")
    if manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{directory}: unsupported dataset version")
    _, tensors = load_tensors(f"{directory}/images.bin")
    records = []
    for entry in manifest["images"]:
        annotations = []
        for ann in entry["annotations"]:
            x1, y1, x2, y2 = ann["bbox_xyxy"]
            annotations.append(Annotation(
                Box(x1, y1, x2, y2, ann.get("score", 1.0)),
                KeypointSet.from_flat(ann["keypoints"]),
                float(ann["area"])))
        records.append(ImageRecord(entry["id"], tensors[entry["tensor"]],
                                   annotations))
    return records


def manifest_hash(directory):
    with open(f"{directory}/manifest.json", "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
