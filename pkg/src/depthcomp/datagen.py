"""Procedural occlusion scenes with exact depth, plus dataset I/O.

A scene is a textured background split into sky, a horizontal road band (the
valid placement region) and ground, overlaid with 1 to 3 flat occluders that
sit closer to the camera than the inserted foreground. The foreground is
stored in a canonical centered pose; the ground truth shows it placed inside
the road band and hidden wherever an occluder is nearer.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .autodiff.tensor import DTYPE
from .errors import DatasetError, ImageIOError
from .imaging import (
    AffineParams,
    BinaryMask,
    DepthMap,
    ImageRgba,
    affine_place,
    classical_composite,
    from_codes,
    load_depth,
    load_image,
    quantize,
    quantize_depth,
    save_depth,
    save_image,
    threshold_depth,
)

FORMAT_VERSION = 1
GENERATOR_VERSION = "procedural-1"
DEFAULT_THRESHOLD = 0.5
SEMI_ALPHA = 128 / 255
OPEN_DEPTH = (0.05, 0.45)
FG_DEPTH = (0.5, 0.55)
OCCLUDER_DEPTH = (0.6, 0.95)
SHAPES = ("rect", "circle", "capsule")
SUBDIRS = ("fg", "bg", "depth", "gt")
FOOTPRINT_DELTA = 10 / 255


@dataclass
class SceneSpec:
    canvas: int
    threshold: float
    fg_depth: float
    fg_shape: dict
    fg_color: Tuple[float, float, float, float]
    placement: AffineParams
    occluders: List[dict]
    valid_region: Tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)
    texture: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = self.placement.to_dict()
        d["fg_color"] = list(self.fg_color)
        d["valid_region"] = list(self.valid_region)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["placement"] = AffineParams(**d["placement"])
        d["fg_color"] = tuple(d["fg_color"])
        d["valid_region"] = tuple(d["valid_region"])
        return cls(**d)

    def valid_mask(self) -> np.ndarray:
        r0, r1, c0, c1 = self.valid_region
        mask = np.zeros((self.canvas, self.canvas), dtype=bool)
        mask[r0:r1, c0:c1] = True
        return mask


@dataclass(eq=False)
class Sample:
    id: str
    foreground: ImageRgba
    background: ImageRgba
    depth: DepthMap
    ground_truth: ImageRgba
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {(r.width, r.height) for r in (self.foreground, self.background, self.depth, self.ground_truth)}
        if len(sizes) != 1:
            raise DatasetError(f"sample {self.id}: rasters disagree in size {sorted(sizes)}")

    @property
    def spec(self) -> Optional[SceneSpec]:
        return SceneSpec.from_dict(self.meta) if "placement" in self.meta else None

    def mask(self, threshold: float) -> BinaryMask:
        return threshold_depth(self.depth, threshold)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def rasterize(shape: dict, size: int) -> np.ndarray:
    """Boolean coverage of a shape sampled at pixel centers."""
    rows, cols = _grid(size)
    kind = shape["kind"]
    if kind == "rect":
        return (np.abs(cols - shape["cx"]) <= shape["w"] / 2) & (np.abs(rows - shape["cy"]) <= shape["h"] / 2)
    if kind == "circle":
        return (cols - shape["cx"]) ** 2 + (rows - shape["cy"]) ** 2 <= shape["r"] ** 2
    if kind == "capsule":
        x0, y0, x1, y1, r = shape["x0"], shape["y0"], shape["x1"], shape["y1"], shape["r"]
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((cols - x0) * dx + (rows - y0) * dy) / max(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
        return (cols - x0 - t * dx) ** 2 + (rows - y0 - t * dy) ** 2 <= r * r
    raise ValueError(f"unknown shape kind {kind!r}")


def _random_shape(rng, cx: float, cy: float, extent: float) -> dict:
    kind = SHAPES[int(rng.integers(len(SHAPES)))]
    if kind == "rect":
        return {"kind": kind, "cx": cx, "cy": cy,
                "w": float(extent * rng.uniform(0.5, 1.0)), "h": float(extent * rng.uniform(0.5, 1.0))}
    if kind == "circle":
        return {"kind": kind, "cx": cx, "cy": cy, "r": float(extent * rng.uniform(0.25, 0.5))}
    angle = rng.uniform(0, math.pi)
    half = extent * rng.uniform(0.2, 0.35)
    return {"kind": kind, "x0": float(cx - half * math.cos(angle)), "y0": float(cy - half * math.sin(angle)),
            "x1": float(cx + half * math.cos(angle)), "y1": float(cy + half * math.sin(angle)),
            "r": float(extent * rng.uniform(0.12, 0.2))}


def _color(rng) -> List[float]:
    return [float(c) / 255 for c in rng.integers(0, 256, size=3)]


def _texture(rng, size: int, band: Tuple[int, int]) -> Tuple[np.ndarray, dict]:
    sky, road, ground = _color(rng), [float(rng.uniform(0.25, 0.6))] * 3, _color(rng)
    noise = float(rng.uniform(0.0, 0.04))
    rows = np.arange(size)[:, None, None]
    rgb = np.where(rows < band[0], np.asarray(sky), np.where(rows < band[1], np.asarray(road), np.asarray(ground)))
    rgb = np.broadcast_to(rgb, (size, size, 3)).copy()
    sky_fade = (1.0 - 0.3 * rows / max(size - 1, 1)) * (rows < band[0])
    rgb = rgb * np.where(rows < band[0], sky_fade, 1.0)
    rgb = rgb + rng.uniform(-noise, noise, size=(size, size, 3))
    pixels = np.concatenate([np.clip(rgb, 0.0, 1.0), np.ones((size, size, 1))], axis=-1)
    return pixels, {"sky": sky, "road": road, "ground": ground, "noise": noise}


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream so samples can be generated in any order."""
    return np.random.default_rng([int(seed), int(index)])


def _placed_span(lo: float, hi: float, scale: float, half: float, shift: float) -> Tuple[float, float]:
    return scale * (lo - half) + half * (1 + shift), scale * (hi - half) + half * (1 + shift)


def _shift_range(lo: float, hi: float, scale: float, half: float, lo_px: float, hi_px: float) -> Tuple[float, float]:
    """Shifts keeping the placed span [lo, hi] (plus one pixel of bilinear spread) inside [lo_px, hi_px]."""
    a = (lo_px + 1 - scale * (lo - half) - half) / half
    b = (hi_px - 1 - scale * (hi - half) - half) / half
    if a > b:
        # span wider than the target on small canvases; center it
        a = b = (a + b) / 2
    return a, b


def generate_scene(rng: np.random.Generator, canvas: int = 64, threshold: float = DEFAULT_THRESHOLD,
                   sample_id: str = "0") -> Sample:
    """Draw one scene; a pure function of the generator state."""
    if canvas < 16:
        raise ValueError(f"canvas must be at least 16 pixels, got {canvas}")
    if not OPEN_DEPTH[1] < threshold <= FG_DEPTH[0]:
        raise ValueError(f"threshold must separate open background from occluders, got {threshold}")
    size = canvas
    half = (size - 1) / 2
    band = (int(round(0.45 * size)), int(round(0.95 * size)))

    # canonical foreground, centered
    fg_extent = size * rng.uniform(0.55, 0.85)
    fg_shape = _random_shape(rng, half, half, fg_extent)
    fg_alpha = 1.0 if rng.random() < 0.5 else SEMI_ALPHA
    fg_color = tuple(_color(rng) + [fg_alpha])
    cover = rasterize(fg_shape, size)
    if not cover.any():
        cover[int(half), int(half)] = True
    fg_pixels = np.zeros((size, size, 4))
    fg_pixels[cover] = fg_color
    foreground = quantize(ImageRgba(fg_pixels.astype(DTYPE)))

    # placement inside the road band
    rows_any, cols_any = np.nonzero(cover)
    scale = float(rng.uniform(0.3, 0.5))
    sy = scale * float(rng.uniform(0.9, 1.1))
    ty_lo, ty_hi = _shift_range(rows_any.min(), rows_any.max(), sy, half, band[0], band[1] - 1)
    tx_lo, tx_hi = _shift_range(cols_any.min(), cols_any.max(), scale, half, 0, size - 1)
    placement = AffineParams(scale, sy, float(rng.uniform(tx_lo, tx_hi)), float(rng.uniform(ty_lo, ty_hi)))
    fg_depth = float(rng.uniform(*FG_DEPTH))

    # background texture and open-ground depth ramp (nearer toward the bottom)
    bg_pixels, texture = _texture(rng, size, band)
    rows = np.arange(size, dtype=np.float64)[:, None] / (size - 1)
    depth = np.broadcast_to(OPEN_DEPTH[0] + (OPEN_DEPTH[1] - OPEN_DEPTH[0]) * rows, (size, size)).copy()

    # occluders, most of them overlapping the placed foreground
    x0, x1 = _placed_span(cols_any.min(), cols_any.max(), placement.sx, half, placement.tx)
    y0, y1 = _placed_span(rows_any.min(), rows_any.max(), placement.sy, half, placement.ty)
    occluders = []
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.8:
            cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        else:
            cx, cy = rng.uniform(0, size - 1), rng.uniform(0, size - 1)
        shape = _random_shape(rng, float(cx), float(cy), max(x1 - x0, y1 - y0, 6.0) * rng.uniform(0.4, 0.8))
        occluders.append({"shape": shape, "color": _color(rng), "depth": float(rng.uniform(*OCCLUDER_DEPTH))})
    for occ in sorted(occluders, key=lambda o: o["depth"]):
        cov = rasterize(occ["shape"], size)
        bg_pixels[cov, :3] = occ["color"]
        depth[cov] = occ["depth"]

    background = quantize(ImageRgba(bg_pixels.astype(DTYPE)))
    depth_map = quantize_depth(DepthMap(depth.astype(DTYPE)))
    spec = SceneSpec(size, float(threshold), fg_depth, fg_shape, fg_color, placement, occluders,
                     (band[0], band[1], 0, size), texture)
    gt = render_ground_truth(foreground, background, depth_map, placement, fg_depth)
    return Sample(str(sample_id), foreground, background, depth_map, gt, spec.to_dict())


def render_ground_truth(foreground: ImageRgba, background: ImageRgba, depth: DepthMap,
                        placement: AffineParams, fg_depth: float) -> ImageRgba:
    """Depth-ordered composite snapped to the 8-bit grid it is stored on."""
    return quantize(classical_composite(affine_place(foreground, placement), fg_depth, background, depth))


def ground_truth_matches(sample: Sample) -> bool:
    spec = sample.spec
    if spec is None:
        return True
    expected = render_ground_truth(sample.foreground, sample.background, sample.depth, spec.placement, spec.fg_depth)
    return bool(np.array_equal(expected.pixels, sample.ground_truth.pixels))


def occluder_union(spec: SceneSpec) -> np.ndarray:
    out = np.zeros((spec.canvas, spec.canvas), dtype=bool)
    for occ in spec.occluders:
        out |= rasterize(occ["shape"], spec.canvas)
    return out


def generate_samples(count: int, seed: int, canvas: int = 64, threshold: float = DEFAULT_THRESHOLD,
                     start: int = 0, workers: int = 1) -> List[Sample]:
    """Samples ``start .. start+count-1``; each id draws from its own stream, so ``workers`` never changes the output."""

    def one(i):
        return generate_scene(sample_rng(seed, i), canvas, threshold, sample_id=f"{i:05d}")

    indices = range(start, start + count)
    if workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, indices))


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    samples: List[dict]
    splits: Dict[str, List[str]]
    threshold: float
    seed: Optional[int]
    canvas: int
    generator_version: str = GENERATOR_VERSION
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        validate_splits(self.splits, [s["id"] for s in self.samples])

    @property
    def ids(self) -> List[str]:
        return [s["id"] for s in self.samples]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        if data.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported manifest format_version {data.get('format_version')!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise DatasetError(f"malformed manifest: {exc}") from None


def validate_splits(splits: Dict[str, List[str]], ids: Sequence[str]) -> None:
    seen: Dict[str, str] = {}
    for name, members in splits.items():
        for sid in members:
            if sid in seen:
                raise DatasetError(f"sample {sid} appears in both {seen[sid]!r} and {name!r} splits")
            seen[sid] = name
    missing = sorted(set(ids) - set(seen))
    unknown = sorted(set(seen) - set(ids))
    if missing or unknown:
        raise DatasetError(f"splits must cover exactly the sample ids (missing {missing[:5]}, unknown {unknown[:5]})")


def split_counts(total: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder allocation, so every count is within one sample of its share."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"split ratios must be three non-negative numbers, got {list(ratios)}")
    shares = total * ratios / ratios.sum()
    counts = np.floor(shares).astype(int)
    for i in np.argsort(-(shares - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def write_dataset(samples: Sequence[Sample], out_dir, split_ratios=(0.8, 0.1, 0.1), threshold: float = DEFAULT_THRESHOLD,
                  seed: Optional[int] = None) -> DatasetManifest:
    if not samples:
        raise DatasetError("cannot write an empty dataset")
    out = Path(out_dir)
    for sub in SUBDIRS:
        try:
            (out / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ImageIOError(out / sub, f"cannot create directory ({exc.strerror})") from exc
    entries = []
    for s in samples:
        files = {sub: f"{sub}/{s.id}.png" for sub in SUBDIRS}
        save_image(s.foreground, out / files["fg"])
        save_image(s.background, out / files["bg"])
        save_depth(s.depth, out / files["depth"])
        save_image(s.ground_truth, out / files["gt"])
        entries.append({"id": s.id, **files, "meta": s.meta})
    ids = [s.id for s in samples]
    n_train, n_test, _ = split_counts(len(ids), split_ratios)
    splits = {"train": ids[:n_train], "test": ids[n_train:n_train + n_test], "validation": ids[n_train + n_test:]}
    manifest = DatasetManifest(entries, splits, float(threshold), seed, samples[0].background.width)
    try:
        (out / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise ImageIOError(out / "manifest.json", f"cannot write manifest ({exc.strerror})") from exc
    return manifest


def load_dataset(root) -> Tuple[List[Sample], DatasetManifest]:
    root = Path(root)
    try:
        text = (root / "manifest.json").read_text()
    except OSError as exc:
        raise DatasetError(f"{root}: no readable manifest.json ({exc.strerror})") from None
    try:
        manifest = DatasetManifest.from_json(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/manifest.json: invalid JSON ({exc})") from None
    samples = []
    for entry in manifest.samples:
        sid = entry["id"]
        for sub in SUBDIRS:
            if not (root / entry[sub]).is_file():
                raise DatasetError(f"sample {sid}: missing file {entry[sub]}")
        try:
            sample = Sample(sid, load_image(root / entry["fg"]), load_image(root / entry["bg"]),
                            load_depth(root / entry["depth"]), load_image(root / entry["gt"]), entry.get("meta", {}))
        except DatasetError:
            raise
        except (ImageIOError, ValueError) as exc:
            raise DatasetError(f"sample {sid}: {exc}") from None
        if not ground_truth_matches(sample):
            raise DatasetError(f"sample {sid}: ground truth disagrees with its scene description")
        samples.append(sample)
    return samples, manifest


def split_samples(samples: Sequence[Sample], manifest: DatasetManifest, split: str) -> List[Sample]:
    wanted = set(manifest.splits.get(split, []))
    return [s for s in samples if s.id in wanted]


# ---------------------------------------------------------------------------
# external datasets
# ---------------------------------------------------------------------------

@dataclass
class ImportLayout:
    fg: str = "fg"
    bg: str = "bg"
    depth: str = "depth"
    gt: str = "gt"
    size: int = 64


def _resize_rgba(img: ImageRgba, size: int) -> ImageRgba:
    if img.width == size and img.height == size:
        return img
    pil = Image.fromarray(np.floor(img.pixels * 255 + 0.5).astype(np.uint8))
    return ImageRgba(from_codes(np.asarray(pil.resize((size, size), Image.BILINEAR))))


def _resize_depth(depth: DepthMap, size: int) -> DepthMap:
    if depth.width == size and depth.height == size:
        return depth
    pil = Image.fromarray(depth.values.astype(np.float32)).resize((size, size), Image.BILINEAR)
    return DepthMap(np.clip(np.asarray(pil), 0.0, 1.0).astype(DTYPE))


def import_external(root, layout: Optional[ImportLayout] = None) -> List[Sample]:
    """Read a four-folder dataset whose depth maps were computed beforehand."""
    layout = layout or ImportLayout()
    root = Path(root)
    folders = {k: root / getattr(layout, k) for k in SUBDIRS}
    if not folders["depth"].is_dir():
        raise DatasetError(
            f"{folders['depth']}: depth folder missing; depth maps must be precomputed with an external "
            "monocular depth estimator, this package does not estimate depth"
        )
    stems = {}
    for key, folder in folders.items():
        if not folder.is_dir():
            raise DatasetError(f"{folder}: expected subfolder {key!r} is missing")
        stems[key] = {p.stem: p for p in sorted(folder.glob("*.png"))}
    all_ids = set().union(*stems.values())
    unmatched = sorted(i for i in all_ids if any(i not in s for s in stems.values()))
    if unmatched:
        raise DatasetError(f"folders disagree; unmatched ids: {', '.join(unmatched[:20])}")
    samples = []
    for sid in sorted(all_ids):
        samples.append(Sample(
            sid,
            _resize_rgba(load_image(stems["fg"][sid]), layout.size),
            _resize_rgba(load_image(stems["bg"][sid]), layout.size),
            _resize_depth(load_depth(stems["depth"][sid]), layout.size),
            _resize_rgba(load_image(stems["gt"][sid]), layout.size),
        ))
    return samples


# ---------------------------------------------------------------------------
# placement accuracy
# ---------------------------------------------------------------------------

@dataclass
class PlacementReport:
    correct: int
    total: int
    empty: List[str]

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def footprint(composite: ImageRgba, background: ImageRgba) -> np.ndarray:
    diff = np.abs(composite.rgb.astype(np.float64) - background.rgb.astype(np.float64)).max(axis=-1)
    return diff > FOOTPRINT_DELTA + 1e-6


def placement_accuracy(composites: Sequence[ImageRgba], samples: Sequence[Sample]) -> PlacementReport:
    """A composite is correct when its foreground footprint stays inside the valid region."""
    if len(composites) != len(samples):
        raise ValueError(f"{len(composites)} composites for {len(samples)} samples")
    correct, empty = 0, []
    for comp, sample in zip(composites, samples):
        spec = sample.spec
        if spec is None:
            raise DatasetError(f"sample {sample.id}: no valid-region metadata")
        fp = footprint(comp, sample.background)
        if not fp.any():
            empty.append(sample.id)
        if not np.any(fp & ~spec.valid_mask()):
            correct += 1
    return PlacementReport(correct, len(samples), empty)
