"""Procedural RGB-D street scenes with controllable appearance shift and depth corruption.

A scene has a far backdrop (IGNORE), a sidewalk band (class 1), a road band
(class 0) and a few standing shapes (classes 2..K-1). Geometry is drawn from a
stream keyed only by the scene seed, so one layout can be rendered under any
domain; appearance and depth corruption draw from domain-keyed streams.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import netpbm
from .rng import stream
from .sensitivity import IGNORE

SHAPES = ("rect", "circle", "triangle")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: tuple[tuple[float, float, float], ...]
    texture_amp: float = 0.0
    illum: tuple[float, float] = (1.0, 0.0)
    depth_hole_rate: float = 0.0
    depth_speckle_sigma: float = 0.0
    seed_stream: str = ""
    backdrop: tuple[float, float, float] = (0.55, 0.7, 0.9)

    def __post_init__(self):
        if not 0.0 <= self.depth_hole_rate <= 1.0:
            raise ValueError("depth_hole_rate must lie in [0, 1]")
        if self.texture_amp < 0 or self.depth_speckle_sigma < 0:
            raise ValueError("texture_amp and depth_speckle_sigma must be >= 0")

    @property
    def K(self) -> int:
        return len(self.palette)


@dataclass
class Sample:
    rgb: np.ndarray  # [3,H,W] in [0,1]
    depth: np.ndarray  # [1,H,W] in [0,1], 1 = nearest
    labels: np.ndarray  # [H,W] uint8, IGNORE = 255


@dataclass
class Shape:
    cls: int
    kind: str
    depth: float
    cy: float
    cx: float
    half_h: float
    half_w: float


@dataclass
class Layout:
    horizon: int
    curb: int
    shapes: list[Shape] = field(default_factory=list)


# ---------------------------------------------------------------------------
# domains


def hue_palette(K: int, hue_shift: float = 0.0, saturation: float = 0.65, value: float = 0.85):
    cols = []
    for k in range(K):
        h = (k / K + hue_shift) % 1.0
        cols.append(tuple(round(c, 6) for c in colorsys.hsv_to_rgb(h, saturation, value)))
    return tuple(cols)


def source_domain(K: int = 6) -> DomainSpec:
    return DomainSpec(
        name="source",
        palette=hue_palette(K),
        texture_amp=0.05,
        illum=(1.0, 0.0),
        depth_hole_rate=0.0,
        depth_speckle_sigma=0.0,
        seed_stream="source",
    )


def shifted_domain(K: int = 6, hole_rate: float = 0.15, speckle: float = 0.05) -> DomainSpec:
    """Target domain: white-balance drift, duller colours, darker light, corrupted depth.

    The hue drift is a quarter of the class spacing, so a target colour stays
    nearest its own source class rather than landing between two classes.
    """
    return DomainSpec(
        name="shifted",
        palette=hue_palette(K, hue_shift=0.25 / K, saturation=0.45, value=0.75),
        texture_amp=0.08,
        illum=(0.8, 0.05),
        depth_hole_rate=hole_rate,
        depth_speckle_sigma=speckle,
        seed_stream="shifted",
        backdrop=(0.75, 0.75, 0.7),
    )


def dark_domain(K: int = 6, hole_rate: float = 0.15, speckle: float = 0.05) -> DomainSpec:
    """Low-light analog: compressed, dim colours with heavy sensor noise."""
    return DomainSpec(
        name="dark",
        palette=hue_palette(K, saturation=0.5, value=0.6),
        texture_amp=0.1,
        illum=(0.35, 0.02),
        depth_hole_rate=hole_rate,
        depth_speckle_sigma=speckle,
        seed_stream="dark",
        backdrop=(0.1, 0.1, 0.15),
    )


DOMAINS = {"source": source_domain, "shifted": shifted_domain, "dark": dark_domain}


def domain_by_name(name: str, K: int) -> DomainSpec:
    if name not in DOMAINS:
        raise ValueError(f"unknown domain {name!r}; choose from {sorted(DOMAINS)}")
    return DOMAINS[name](K)


# ---------------------------------------------------------------------------
# geometry


def class_depth_band(cls: int, K: int) -> tuple[float, float]:
    """Depth range for standing shapes of class ``cls`` (2..K-1); nearer for higher ids."""
    n = max(K - 2, 1)
    centre = 0.25 + 0.5 * (cls - 2) / max(n - 1, 1)
    return max(centre - 0.12, 0.08), min(centre + 0.12, 0.95)


def ground_depth(rows: np.ndarray, horizon: int, H: int) -> np.ndarray:
    """Inverse depth of the ground plane: 0 at the horizon, 1 at the bottom row."""
    return np.clip((rows - horizon + 1) / (H - horizon), 0.0, 1.0)


def sample_layout(K: int, size: tuple[int, int], rng: np.random.Generator) -> Layout:
    H, W = size
    horizon = int(rng.integers(int(0.3 * H), int(0.42 * H) + 1))
    curb = int(rng.integers(horizon + int(0.15 * H), horizon + int(0.3 * H) + 1))
    layout = Layout(horizon=horizon, curb=min(curb, H - 4))
    n_shapes = int(rng.integers(2, 7))
    used: set[float] = set()
    for _ in range(n_shapes):
        cls = int(rng.integers(2, K)) if K > 2 else 1
        lo, hi = class_depth_band(cls, K)
        d = float(rng.uniform(lo, hi))
        while round(d, 6) in used:
            d = min(d + 1e-3, 0.99)
        used.add(round(d, 6))
        base = horizon + d * (H - horizon) - 1
        scale = (0.25 + 0.75 * d) * float(rng.uniform(0.7, 1.3))
        half_h = max(2.0, 0.18 * H * scale)
        half_w = max(2.0, 0.14 * W * scale * float(rng.uniform(0.7, 1.5)))
        cx = float(rng.uniform(half_w * 0.5, W - half_w * 0.5))
        cy = min(base - half_h, H - 1 - half_h)
        kind = SHAPES[(cls - 2) % len(SHAPES)] if K > 2 else "rect"
        layout.shapes.append(Shape(cls, kind, d, cy, cx, half_h, half_w))
    layout.shapes.sort(key=lambda s: s.depth)
    return layout


def shape_mask(shape: Shape, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy = yy - shape.cy
    dx = xx - shape.cx
    if shape.kind == "rect":
        return (np.abs(dy) <= shape.half_h) & (np.abs(dx) <= shape.half_w)
    if shape.kind == "circle":
        r = min(shape.half_h, shape.half_w)
        return dy * dy + dx * dx <= r * r
    # apex at the top, base at the bottom
    t = (dy + shape.half_h) / (2.0 * shape.half_h)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * shape.half_w)


def render_geometry(layout: Layout, K: int, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Labels and clean depth via painter's algorithm (far shapes first)."""
    H, W = size
    rows = np.arange(H, dtype=np.float64)[:, None]
    labels = np.full((H, W), IGNORE, dtype=np.uint8)
    depth = np.zeros((H, W))
    ground = np.broadcast_to(ground_depth(rows, layout.horizon, H), (H, W))
    below = np.broadcast_to(rows >= layout.horizon, (H, W))
    sidewalk = below & np.broadcast_to(rows < layout.curb, (H, W))
    road = np.broadcast_to(rows >= layout.curb, (H, W))
    labels[sidewalk] = 1
    labels[road] = 0
    depth[below] = ground[below]
    # raised curb: the sidewalk surface sits slightly nearer than the road plane
    depth[sidewalk] = np.minimum(ground[sidewalk] + 0.04, 1.0)
    for s in layout.shapes:
        m = shape_mask(s, size)
        labels[m] = s.cls
        depth[m] = s.depth
    return labels, depth


# ---------------------------------------------------------------------------
# appearance and corruption


def render_appearance(
    labels: np.ndarray, layout: Layout, spec: DomainSpec, rng: np.random.Generator
) -> np.ndarray:
    H, W = labels.shape
    palette = np.asarray(spec.palette, dtype=np.float64)
    rgb = np.empty((H, W, 3))
    rgb[:] = spec.backdrop
    valid = labels != IGNORE
    rgb[valid] = palette[labels[valid]]
    amp = spec.texture_amp
    if amp > 0:
        # per-scene class tint plus per-pixel grain
        for cls in range(spec.K):
            tint = rng.uniform(-amp, amp, size=3)
            rgb[labels == cls] += tint
        rgb += rng.normal(0.0, amp, size=rgb.shape)
    gain, offset = spec.illum
    rgb = rgb * gain + offset
    return np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1)


def corrupt_depth(depth: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian speckle (clamped to [0,1]), then zeroed 4x4 hole blocks.

    Holes are applied last so missing measurements stay exactly zero.
    """
    d = np.array(depth, dtype=np.float64)
    H, W = d.shape[-2:]
    if spec.depth_speckle_sigma > 0:
        d = np.clip(d + rng.normal(0.0, spec.depth_speckle_sigma, size=d.shape), 0.0, 1.0)
    if spec.depth_hole_rate > 0:
        bh, bw = -(-H // 4), -(-W // 4)
        holes = rng.random((bh, bw)) < spec.depth_hole_rate
        full = np.kron(holes, np.ones((4, 4), dtype=bool))[:H, :W]
        d[..., full] = 0.0
    return d


def generate_scene(
    spec: DomainSpec, K: int, size: tuple[int, int], seed: int, corrupt: bool = False
) -> Sample:
    """Render scene ``seed`` under ``spec``; ``corrupt`` adds the domain's depth noise."""
    if K < 2:
        raise ValueError("K must be >= 2")
    H, W = size
    if H < 16 or W < 16:
        raise ValueError("scenes need H, W >= 16")
    if spec.K != K:
        raise ValueError(f"palette has {spec.K} entries, K is {K}")
    layout = sample_layout(K, size, stream(seed, "geometry"))
    labels, depth = render_geometry(layout, K, size)
    rgb = render_appearance(labels, layout, spec, stream(seed, "appearance", spec.seed_stream))
    if corrupt:
        depth = corrupt_depth(depth, spec, stream(seed, "corruption", spec.seed_stream))
    return Sample(rgb=rgb, depth=depth[None], labels=labels)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    domain: str
    ids: list[str]
    seeds: list[int]
    rgb: np.ndarray  # [N,3,H,W]
    depth: np.ndarray  # [N,1,H,W]
    labels: np.ndarray  # [N,H,W]

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int) -> Sample:
        return Sample(self.rgb[i], self.depth[i], self.labels[i])


def scene_seeds(root_seed: int, count: int) -> list[int]:
    return [int(s) for s in stream(root_seed, "scenes").integers(0, 2**62, size=count)]


def build_dataset(spec: DomainSpec, K: int, size: tuple[int, int], count: int, seed: int) -> Dataset:
    seeds = scene_seeds(seed, count)
    samples = [generate_scene(spec, K, size, s, corrupt=True) for s in seeds]
    return Dataset(
        domain=spec.name,
        ids=[f"{i:05d}" for i in range(count)],
        seeds=seeds,
        rgb=np.stack([s.rgb for s in samples]) if samples else np.zeros((0, 3) + size),
        depth=np.stack([s.depth for s in samples]) if samples else np.zeros((0, 1) + size),
        labels=np.stack([s.labels for s in samples]) if samples else np.zeros((0,) + size, np.uint8),
    )


def write_sample(sample: Sample, directory: str | Path, sample_id: str) -> list[Path]:
    directory = Path(directory)
    rgb8 = np.rint(np.clip(sample.rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    depth16 = np.rint(np.clip(sample.depth[0], 0, 1) * 65535).astype(np.uint16)
    paths = [
        directory / f"{sample_id}.rgb.ppm",
        directory / f"{sample_id}.depth.pgm",
        directory / f"{sample_id}.label.pgm",
    ]
    netpbm.write_ppm(paths[0], rgb8)
    netpbm.write_pgm(paths[1], depth16, maxval=65535)
    netpbm.write_pgm(paths[2], sample.labels.astype(np.uint8))
    return paths


def read_sample(directory: str | Path, sample_id: str) -> Sample:
    directory = Path(directory)
    rgb = netpbm.read_ppm(directory / f"{sample_id}.rgb.ppm")
    depth, maxval = netpbm.read_pgm_maxval(directory / f"{sample_id}.depth.pgm")
    labels = netpbm.read_pgm(directory / f"{sample_id}.label.pgm")
    return Sample(
        rgb=rgb.transpose(2, 0, 1).astype(np.float64) / 255.0,
        depth=depth[None].astype(np.float64) / maxval,
        labels=labels.astype(np.uint8),
    )


MANIFEST = "manifest.jsonl"


def write_dataset(dataset: Dataset, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    lines = []
    for i, (sid, seed) in enumerate(zip(dataset.ids, dataset.seeds)):
        written += write_sample(dataset.sample(i), directory, sid)
        lines.append(json.dumps({"id": sid, "domain": dataset.domain, "geometry_seed": seed}, sort_keys=True))
    manifest = directory / MANIFEST
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    written.append(manifest)
    return written


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    records = [json.loads(line) for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    samples = [read_sample(directory, r["id"]) for r in records]
    if not samples:
        raise ValueError(f"dataset {directory} is empty")
    return Dataset(
        domain=records[0]["domain"],
        ids=[r["id"] for r in records],
        seeds=[int(r["geometry_seed"]) for r in records],
        rgb=np.stack([s.rgb for s in samples]),
        depth=np.stack([s.depth for s in samples]),
        labels=np.stack([s.labels for s in samples]),
    )


def class_frequencies(dataset: Dataset, K: int) -> np.ndarray:
    labels = dataset.labels.reshape(-1)
    counts = np.bincount(labels[labels != IGNORE].astype(np.int64), minlength=K)[:K]
    return counts / max(counts.sum(), 1)


# ---------------------------------------------------------------------------
# domain-shift statistics


def rgb_histogram(rgb: np.ndarray, bins: int = 16) -> np.ndarray:
    """Per-channel normalized histogram over ``[N,3,H,W]`` images, concatenated."""
    hists = [np.histogram(rgb[:, c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)]
    h = np.concatenate(hists).astype(np.float64)
    return h / (h.sum() / 3.0)


def shift_statistics(a: Dataset | list[Sample], b: Dataset | list[Sample]) -> tuple[float, float]:
    """(mean per-channel L1 distance of RGB histograms, KS statistic of depth values)."""

    def arrays(x):
        if isinstance(x, Dataset):
            return x.rgb, x.depth
        return np.stack([s.rgb for s in x]), np.stack([s.depth for s in x])

    rgb_a, d_a = arrays(a)
    rgb_b, d_b = arrays(b)
    l1 = float(np.abs(rgb_histogram(rgb_a) - rgb_histogram(rgb_b)).sum() / 3.0)
    ks = float(sps.ks_2samp(d_a.reshape(-1), d_b.reshape(-1)).statistic)
    return l1, ks
