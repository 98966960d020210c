"""Synthetic scene renderer and on-disk dataset builder.

Scenes are 64x64 RGB views of flat shapes (box, disc, triangle) floating in
front of a textured backdrop ramp. Every quantity the losses reference is
known exactly: per-pixel depth of the visible surface, the transmission map
t = exp(-beta*depth), and the fogged image composed from them. Rendering is
a pure function of (spec, seed).

Dataset layout under a root directory:
  manifest.json, scene_spec.json, then one subdirectory per split holding
  {id}_clear.png, {id}_foggy.png, {id}_depth.fmap, {id}_t.fmap,
  {id}_labels.json (or {id}_labels.sealed.json for the train-target split)
  and {id}_meta.json with beta, domain, and file checksums.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fog import apply_fog, transmission_from_depth

CLASS_NAMES = ("box", "disc", "triangle")
SPLIT_OFFSETS = {"train_source": 0, "train_target": 1, "test_target": 2, "test_clear": 3}
SPLIT_DOMAINS = {
    "train_source": "source",
    "train_target": "target",
    "test_target": "target",
    "test_clear": "source",
}
SEALED_SUFFIX = "_labels.sealed.json"

_BASE_COLORS = np.array([
    [0.85, 0.15, 0.12],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.85],
])
_COLOR_JITTER = 0.08
_PLACEMENT_TRIES = 100
_SCENE_ATTEMPTS = 100
_MAX_PLACEMENT_IOU = 0.2
_MIN_LABEL_AREA = 9.0
_MIN_VISIBLE_FRACTION = 0.45
_EDGE_MARGIN = 1.0


@dataclass
class SceneSpec:
    """Renderer and dataset configuration; hashed into the manifest."""

    image_size: int = 64
    num_classes: int = 3
    object_count: tuple[int, int] = (1, 3)
    object_depth_range: tuple[float, float] = (6.0, 22.0)
    backdrop_depth_range: tuple[float, float] = (38.0, 78.0)
    depth_range: tuple[float, float] = (2.0, 80.0)
    radius_range: tuple[float, float] = (5.5, 12.5)
    focal: float = 110.0
    beta_range: tuple[float, float] = (0.03, 0.12)
    airlight: tuple[float, float, float] = (0.9, 0.9, 0.9)
    background_base: tuple[float, float, float] = (0.40, 0.42, 0.44)
    # per-scene uniform brightness shift of the background; forces the
    # detector onto local contrast instead of absolute background level
    background_brightness_jitter: float = 0.25
    background_noise: float = 0.06
    background_cells: int = 8
    depth_noise: float = 2.0
    counts: dict = field(default_factory=lambda: {
        "train_source": 500, "train_target": 500, "test_target": 100, "test_clear": 100,
    })
    seed: int = 0
    # explicit placements for controlled scenes; each entry is a dict with
    # class_id, world_size, depth, cx, cy (pixel center). None -> sampled.
    objects: list | None = None

    def __post_init__(self):
        if not (1 <= self.num_classes <= len(CLASS_NAMES)):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    def class_names(self) -> list[str]:
        return list(CLASS_NAMES[: self.num_classes])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("object_count", "object_depth_range", "backdrop_depth_range",
                    "depth_range", "radius_range", "beta_range", "airlight",
                    "background_base"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class BoxLabel:
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2; x1 < x2, y1 < y2

    def to_dict(self) -> dict:
        x1, y1, x2, y2 = self.box
        return {"class": int(self.class_id), "x1": float(x1), "y1": float(y1),
                "x2": float(x2), "y2": float(y2)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabel":
        return cls(int(d["class"]), (float(d["x1"]), float(d["y1"]),
                                     float(d["x2"]), float(d["y2"])))


@dataclass
class SceneSample:
    clear: np.ndarray          # (3, H, W) in [0, 1]
    foggy: np.ndarray          # (3, H, W) in [0, 1]
    depth: np.ndarray          # (H, W) toy-meters
    t_gt: np.ndarray           # (H, W) in (0, 1]
    labels: list | None        # list of BoxLabel; None when sealed
    domain: str                # "source" | "target"
    beta: float


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Resample a (c, gh, gw) grid to (c, size, size) at pixel centers."""
    c, gh, gw = grid.shape
    ys = np.clip((np.arange(size) + 0.5) * gh / size - 0.5, 0.0, gh - 1.0)
    xs = np.clip((np.arange(size) + 0.5) * gw / size - 0.5, 0.0, gw - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    g00 = grid[:, y0[:, None], x0[None, :]]
    g01 = grid[:, y0[:, None], x1[None, :]]
    g10 = grid[:, y1[:, None], x0[None, :]]
    g11 = grid[:, y1[:, None], x1[None, :]]
    top = g00 * (1 - wx) + g01 * wx
    bot = g10 * (1 - wx) + g11 * wx
    return top * (1 - wy) + bot * wy


def project_radius(world_size: float, depth: float, focal: float) -> float:
    """Pinhole projection of an object's world radius to pixels."""
    if depth <= 0:
        raise ValueError(f"depth must be > 0, got {depth}")
    return focal * world_size / depth


def _rasterize(kind: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean mask of the shape at pixel centers; kind indexes CLASS_NAMES."""
    px = np.arange(size) + 0.5
    xs = px[None, :] - cx
    ys = px[:, None] - cy
    if kind == 0:  # box
        return (np.abs(xs) <= r) & (np.abs(ys) <= r)
    if kind == 1:  # disc
        return xs * xs + ys * ys <= r * r
    if kind == 2:  # triangle, equilateral, apex up, inscribed in radius r
        angles = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        vx = np.cos(angles) * r
        vy = -np.sin(angles) * r  # image rows grow downward
        inside = np.ones((size, size), dtype=bool)
        for i in range(3):
            ex, ey = vx[(i + 1) % 3] - vx[i], vy[(i + 1) % 3] - vy[i]
            cross = ex * (ys - vy[i]) - ey * (xs - vx[i])
            inside &= cross <= 0
        return inside
    raise ValueError(f"unknown shape kind {kind}")


def _bbox_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> list | None:
    """Draw object placements subject to fit and overlap limits."""
    lo, hi = spec.object_count
    count = int(rng.integers(lo, hi + 1))
    size = spec.image_size
    placed = []
    boxes = []
    for _ in range(count):
        for _try in range(_PLACEMENT_TRIES):
            depth = float(rng.uniform(*spec.object_depth_range))
            radius = float(rng.uniform(*spec.radius_range))
            world_size = radius * depth / spec.focal
            lo_c = radius + _EDGE_MARGIN
            hi_c = size - radius - _EDGE_MARGIN
            if hi_c <= lo_c:
                continue
            cx = float(rng.uniform(lo_c, hi_c))
            cy = float(rng.uniform(lo_c, hi_c))
            class_id = int(rng.integers(0, spec.num_classes))
            bbox = (cx - radius, cy - radius, cx + radius, cy + radius)
            if any(_bbox_iou(bbox, b) > _MAX_PLACEMENT_IOU for b in boxes):
                continue
            jitter = rng.uniform(-_COLOR_JITTER, _COLOR_JITTER, 3)
            color = np.clip(_BASE_COLORS[class_id] + jitter, 0.02, 0.98)
            placed.append({"class_id": class_id, "world_size": world_size,
                           "depth": depth, "cx": cx, "cy": cy, "color": color})
            boxes.append(bbox)
            break
        else:
            return None
    return placed


def _forced_objects(spec: SceneSpec, rng: np.random.Generator) -> list:
    out = []
    for obj in spec.objects:
        class_id = int(obj["class_id"])
        jitter = rng.uniform(-_COLOR_JITTER, _COLOR_JITTER, 3)
        color = np.clip(_BASE_COLORS[class_id] + jitter, 0.02, 0.98)
        out.append({"class_id": class_id, "world_size": float(obj["world_size"]),
                    "depth": float(obj["depth"]), "cx": float(obj["cx"]),
                    "cy": float(obj["cy"]), "color": color})
    return out


def render_scene(spec: SceneSpec, seed: int) -> SceneSample:
    """Render one scene deterministically from (spec, seed).

    If sampled placement cannot satisfy the overlap and fit limits, the
    whole scene is regenerated with an incremented sub-seed.
    """
    for attempt in range(_SCENE_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        sample = _try_render(spec, rng)
        if sample is not None:
            return sample
    raise RuntimeError(f"could not place objects after {_SCENE_ATTEMPTS} scene attempts")


def _try_render(spec: SceneSpec, rng: np.random.Generator) -> SceneSample | None:
    size = spec.image_size

    # background color texture and depth ramp (far at the top, near at the bottom)
    brightness = rng.uniform(-spec.background_brightness_jitter,
                             spec.background_brightness_jitter)
    noise = rng.uniform(-1.0, 1.0, (3, spec.background_cells, spec.background_cells))
    canvas = np.asarray(spec.background_base, dtype=np.float64)[:, None, None] \
        + brightness + spec.background_noise * _bilinear_upsample(noise, size)
    canvas = np.clip(canvas, 0.0, 1.0)

    near, far = spec.backdrop_depth_range
    ramp = far - (far - near) * (np.arange(size) / (size - 1))
    dnoise = rng.uniform(-1.0, 1.0, (1, spec.background_cells, spec.background_cells))
    depth = np.clip(
        ramp[:, None] + spec.depth_noise * _bilinear_upsample(dnoise, size)[0],
        near, far,
    )

    beta = float(rng.uniform(*spec.beta_range))

    if spec.objects is not None:
        objects = _forced_objects(spec, rng)
    else:
        objects = _sample_objects(spec, rng)
        if objects is None:
            return None

    # far-to-near painting with a z-buffer; owner tracks the visible surface
    owner = np.full((size, size), -1, dtype=np.int64)
    order = sorted(range(len(objects)), key=lambda i: -objects[i]["depth"])
    totals = [0] * len(objects)
    for i in order:
        obj = objects[i]
        radius = project_radius(obj["world_size"], obj["depth"], spec.focal)
        mask = _rasterize(obj["class_id"], obj["cx"], obj["cy"], radius, size)
        totals[i] = int(mask.sum())
        visible = mask & (obj["depth"] < depth)
        canvas[:, visible] = obj["color"][:, None]
        depth[visible] = obj["depth"]
        owner[visible] = i

    labels = []
    for i, obj in enumerate(objects):
        vis = owner == i
        n_vis = int(vis.sum())
        if totals[i] == 0 or n_vis == 0:
            continue
        if n_vis / totals[i] < _MIN_VISIBLE_FRACTION:
            continue
        rows, cols = np.nonzero(vis)
        x1, x2 = float(cols.min()), float(cols.max() + 1)
        y1, y2 = float(rows.min()), float(rows.max() + 1)
        if (x2 - x1) * (y2 - y1) < _MIN_LABEL_AREA:
            continue
        labels.append(BoxLabel(obj["class_id"], (x1, y1, x2, y2)))

    # cast depth through float32 so FMAP round trips are bitwise
    depth = np.clip(depth, *spec.depth_range).astype(np.float32).astype(np.float64)
    t_gt = transmission_from_depth(depth, beta)
    clear = np.clip(canvas, 0.0, 1.0)
    foggy = apply_fog(clear, t_gt, spec.airlight)
    return SceneSample(clear=clear, foggy=foggy, depth=depth, t_gt=t_gt,
                       labels=labels, domain="source", beta=beta)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_fmap(path, values: np.ndarray) -> None:
    """FMAP: magic "FMAP", u32 height, u32 width (LE), f32 LE row-major."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError(f"FMAP stores 2-d maps, got shape {v.shape}")
    h, w = v.shape
    payload = np.ascontiguousarray(v, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"FMAP")
        f.write(struct.pack("<II", h, w))
        f.write(payload)


def read_fmap(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing FMAP file: {path}") from None
    if len(raw) < 12 or raw[:4] != b"FMAP":
        raise ValueError(f"corrupt FMAP file (bad magic): {path}")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * h * w:
        raise ValueError(f"corrupt FMAP file (truncated payload): {path}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a (3, H, W) [0,1] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {img.shape}")
    quant = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(quant, 0, 2), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.moveaxis(arr, 2, 0) / 255.0


def _labels_to_json(labels) -> dict:
    return {"boxes": [b.to_dict() for b in labels]}


def _labels_from_json(d: dict) -> list:
    return [BoxLabel.from_dict(b) for b in d["boxes"]]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_sample(sample: SceneSample, directory, sample_id: str, seal_labels: bool = False) -> None:
    """Write one sample's files plus a meta record with checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        f"{sample_id}_clear.png": lambda p: write_png(p, sample.clear),
        f"{sample_id}_foggy.png": lambda p: write_png(p, sample.foggy),
        f"{sample_id}_depth.fmap": lambda p: write_fmap(p, sample.depth),
        f"{sample_id}_t.fmap": lambda p: write_fmap(p, sample.t_gt),
    }
    label_name = (sample_id + SEALED_SUFFIX) if seal_labels else f"{sample_id}_labels.json"
    files[label_name] = lambda p: p.write_text(
        json.dumps(_labels_to_json(sample.labels or []), sort_keys=True))
    for name, writer in files.items():
        writer(directory / name)
    meta = {
        "beta": sample.beta,
        "domain": sample.domain,
        "checksums": {name: _sha256(directory / name) for name in files},
    }
    (directory / f"{sample_id}_meta.json").write_text(json.dumps(meta, sort_keys=True))


def _load_checked(directory: Path, name: str, checksums: dict, verify: bool) -> Path:
    path = directory / name
    if not path.exists():
        raise FileNotFoundError(f"missing sample file: {path}")
    if verify:
        expected = checksums.get(name)
        if expected is not None and _sha256(path) != expected:
            raise ValueError(f"checksum mismatch for {path}")
    return path


def load_sample_dir(directory, sample_id: str, unseal: bool = False,
                    verify: bool = True) -> SceneSample:
    """Load one sample from its directory; sealed labels stay None unless
    unseal is set."""
    directory = Path(directory)
    meta_path = directory / f"{sample_id}_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sample file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    checksums = meta.get("checksums", {})

    clear = read_png(_load_checked(directory, f"{sample_id}_clear.png", checksums, verify))
    foggy = read_png(_load_checked(directory, f"{sample_id}_foggy.png", checksums, verify))
    depth = read_fmap(_load_checked(directory, f"{sample_id}_depth.fmap", checksums, verify))
    t_gt = read_fmap(_load_checked(directory, f"{sample_id}_t.fmap", checksums, verify))

    sealed_path = directory / (sample_id + SEALED_SUFFIX)
    open_path = directory / f"{sample_id}_labels.json"
    labels = None
    if sealed_path.exists():
        if unseal:
            _load_checked(directory, sealed_path.name, checksums, verify)
            labels = _labels_from_json(json.loads(sealed_path.read_text()))
    else:
        _load_checked(directory, open_path.name, checksums, verify)
        labels = _labels_from_json(json.loads(open_path.read_text()))

    return SceneSample(clear=clear, foggy=foggy, depth=depth, t_gt=t_gt,
                       labels=labels, domain=meta["domain"], beta=float(meta["beta"]))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    sample_ids: list
    splits: dict
    class_names: list
    image_size: int
    config_hash: str
    seed: int

    def split_of(self, sample_id: str) -> str:
        for split, ids in self.splits.items():
            if sample_id in ids:
                return split
        raise KeyError(f"unknown sample id: {sample_id}")


def _scene_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), SPLIT_OFFSETS[split], int(index)])
    hi, lo = ss.generate_state(2)
    return (int(hi) << 32) | int(lo)


def synthesize_dataset(spec: SceneSpec, out_dir, overwrite: bool = False) -> DatasetManifest:
    """Render all four splits to out_dir and write the manifest.

    Train-target labels are written sealed; everything else stores labels
    openly. Refuses a non-empty out_dir unless overwrite is set, and will
    only wipe a directory that already looks like a dataset.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise FileExistsError(f"output directory {out_dir} is not empty")
        if not (out_dir / "manifest.json").exists():
            raise FileExistsError(
                f"refusing to overwrite {out_dir}: no manifest.json, not a dataset directory")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    splits = {}
    for split in SPLIT_OFFSETS:
        count = int(spec.counts.get(split, 0))
        split_dir = out_dir / split
        ids = []
        for i in range(count):
            sample_id = f"{split}_{i:04d}"
            sample = render_scene(spec, _scene_seed(spec.seed, split, i))
            sample.domain = SPLIT_DOMAINS[split]
            save_sample(sample, split_dir, sample_id,
                        seal_labels=(split == "train_target"))
            ids.append(sample_id)
        splits[split] = ids

    manifest = DatasetManifest(
        root=out_dir,
        sample_ids=[i for ids in splits.values() for i in ids],
        splits=splits,
        class_names=spec.class_names(),
        image_size=spec.image_size,
        config_hash=spec.config_hash(),
        seed=spec.seed,
    )
    payload = {
        "sample_ids": manifest.sample_ids,
        "splits": manifest.splits,
        "class_names": manifest.class_names,
        "image_size": manifest.image_size,
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    (out_dir / "scene_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    d = json.loads(path.read_text())
    return DatasetManifest(root=root, sample_ids=d["sample_ids"], splits=d["splits"],
                           class_names=d["class_names"], image_size=int(d["image_size"]),
                           config_hash=d["config_hash"], seed=int(d["seed"]))


def load_scene_spec(root) -> SceneSpec:
    path = Path(root) / "scene_spec.json"
    if not path.exists():
        raise FileNotFoundError(f"missing scene spec: {path}")
    return SceneSpec.from_dict(json.loads(path.read_text()))


def load_sample(manifest: DatasetManifest, sample_id: str, unseal: bool = False,
                verify: bool = True) -> SceneSample:
    split = manifest.split_of(sample_id)
    return load_sample_dir(manifest.root / split, sample_id, unseal=unseal, verify=verify)


class FogDataset:
    """Manifest-backed sample access with a compact in-memory cache.

    Images are cached as uint8 and maps as float32 (their codec precision),
    so repeated loads during training cost decode time only once.
    """

    def __init__(self, root):
        self.manifest = load_manifest(root)
        self._cache: dict = {}

    def ids(self, split: str) -> list:
        if split not in self.manifest.splits:
            raise KeyError(f"unknown split: {split}")
        return list(self.manifest.splits[split])

    @property
    def class_names(self) -> list:
        return list(self.manifest.class_names)

    def load(self, sample_id: str, unseal: bool = False) -> SceneSample:
        key = (sample_id, unseal)
        cached = self._cache.get(key)
        if cached is None:
            sample = load_sample(self.manifest, sample_id, unseal=unseal)
            cached = (
                np.clip(np.round(sample.clear * 255.0), 0, 255).astype(np.uint8),
                np.clip(np.round(sample.foggy * 255.0), 0, 255).astype(np.uint8),
                sample.depth.astype(np.float32),
                sample.t_gt.astype(np.float32),
                sample.labels,
                sample.domain,
                sample.beta,
            )
            self._cache[key] = cached
        clear_u8, foggy_u8, depth_f32, t_f32, labels, domain, beta = cached
        return SceneSample(
            clear=clear_u8.astype(np.float64) / 255.0,
            foggy=foggy_u8.astype(np.float64) / 255.0,
            depth=depth_f32.astype(np.float64),
            t_gt=t_f32.astype(np.float64),
            labels=None if labels is None else list(labels),
            domain=domain,
            beta=beta,
        )
