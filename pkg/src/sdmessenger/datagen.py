"""Synthetic multi-domain 2D segmentation corpora.

Scenes are a handful of ellipses, rings and rectangles painted over a
background; every class has a fixed base intensity and a domain restyles
that intensity with a pixelwise affine map, a gamma curve, additive
Gaussian noise and a box blur (in that order).

On disk a corpus is a directory with ``images/`` and ``labels/`` holding
16-bit grayscale PNGs and a tab-separated ``manifest.tsv``.  Images are
quantized to ``round(x * 65535)``; labels store class indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, ManifestError

SHAPE_KINDS = ("ellipse", "ring", "rectangle")
PRESETS = ("ssmis", "umda", "semimdg")
SPLITS = ("labeled", "unlabeled", "test")
MANIFEST_COLUMNS = ("sample_id", "domain_id", "split", "image_path", "label_path")
MANIFEST_MAGIC = "# sdmessenger corpus v1"
NO_LABEL = "-"

# inner/outer axis ratio of a ring
RING_INNER = 0.55
MIN_SIZE = 16


@dataclass(frozen=True)
class DomainStyle:
    domain_id: int
    intensity_gain: float = 1.0
    intensity_bias: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractError(f"gamma must be > 0, got {self.gamma}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_radius < 0 or int(self.blur_radius) != self.blur_radius:
            raise ContractError(f"blur_radius must be a nonnegative integer, got {self.blur_radius}")

    def apply(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = self.intensity_gain * base + self.intensity_bias
        x = np.clip(x, 0.0, 1.0) ** self.gamma
        # always draw, so styles differing only in sigma share the noise field
        x = x + self.noise_sigma * rng.standard_normal(base.shape)
        if self.blur_radius > 0:
            x = ndimage.uniform_filter(x, size=2 * self.blur_radius + 1, mode="nearest")
        return np.clip(x, 0.0, 1.0)


# Domains 0-2 are the default training domains, 3 is the default unseen one.
DOMAIN_TABLE = {
    0: DomainStyle(0, 1.00, 0.00, 1.00, 0.03, 0),
    1: DomainStyle(1, 0.75, 0.20, 0.80, 0.05, 1),
    2: DomainStyle(2, 1.10, -0.05, 1.50, 0.04, 0),
    3: DomainStyle(3, 0.60, 0.25, 1.25, 0.07, 1),
    4: DomainStyle(4, 1.20, -0.10, 0.65, 0.02, 2),
    5: DomainStyle(5, 0.90, 0.05, 2.00, 0.08, 0),
}


def domain_style(domain_id: int) -> DomainStyle:
    """Style for ``domain_id``; ids outside the table get a seeded random style."""
    if domain_id in DOMAIN_TABLE:
        return DOMAIN_TABLE[domain_id]
    rng = np.random.default_rng([0x5D, domain_id])
    return DomainStyle(
        domain_id,
        intensity_gain=float(rng.uniform(0.6, 1.2)),
        intensity_bias=float(rng.uniform(-0.1, 0.3)),
        gamma=float(rng.uniform(0.6, 1.8)),
        noise_sigma=float(rng.uniform(0.02, 0.08)),
        blur_radius=int(rng.integers(0, 3)),
    )


@dataclass(frozen=True)
class Shape:
    class_id: int
    kind: str
    center: tuple[float, float]  # (row, col)
    axes: tuple[float, float]  # (row semi-axis, col semi-axis) before rotation
    rotation: float = 0.0

    def mask(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        dy = rows - self.center[0]
        dx = cols - self.center[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        ay, ax = self.axes
        if self.kind == "rectangle":
            return (np.abs(u) <= ax) & (np.abs(v) <= ay)
        r = (u / ax) ** 2 + (v / ay) ** 2
        if self.kind == "ellipse":
            return r <= 1.0
        if self.kind == "ring":
            return (r <= 1.0) & (r > RING_INNER**2)
        raise ContractError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    image_size: tuple[int, int]
    num_classes: int

    def validate(self):
        h, w = self.image_size
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ContractError(f"image size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
        if self.num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.num_classes}")
        for shape in self.shapes:
            if not 1 <= shape.class_id < self.num_classes:
                raise ContractError(f"class_id {shape.class_id} outside 1..{self.num_classes - 1}")
            if shape.kind not in SHAPE_KINDS:
                raise ContractError(f"unknown shape kind {shape.kind!r}")
            if min(shape.axes) <= 0:
                raise ContractError(f"shape axes must be positive, got {shape.axes}")


def base_intensity(num_classes: int) -> np.ndarray:
    """Per-class intensity before domain styling: background darkest."""
    return 0.15 + 0.7 * np.arange(num_classes) / (num_classes - 1)


def label_map(spec: SceneSpec) -> np.ndarray:
    spec.validate()
    h, w = spec.image_size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    for shape in spec.shapes:
        labels[shape.mask(rows, cols)] = shape.class_id
    return labels


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[H, W] class indices -> [1, L, H, W] float64 one-hot."""
    out = labels[None] == np.arange(num_classes)[:, None, None]
    return out[None].astype(np.float64)


def render_scene(spec: SceneSpec, style: DomainStyle, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec`` under ``style``.

    Returns ``(image, label)`` with shapes ``[1, 1, H, W]`` (values in [0, 1])
    and ``[1, L, H, W]`` (one-hot).  The label never depends on the style.
    """
    labels = label_map(spec)
    base = base_intensity(spec.num_classes)[labels]
    image = style.apply(base, np.random.default_rng(seed))
    return image[None, None], one_hot(labels, spec.num_classes)


def random_scene(rng: np.random.Generator, image_size: tuple[int, int], num_classes: int,
                 max_shapes: int = 4) -> SceneSpec:
    """Every foreground class gets one shape, plus random extras up to ``max_shapes`` in total."""
    h, w = image_size
    shapes = []
    n_extra = int(rng.integers(0, max_shapes + 1 - (num_classes - 1))) if max_shapes >= num_classes else 0
    classes = list(range(1, num_classes)) + [int(rng.integers(1, num_classes)) for _ in range(n_extra)]
    for class_id in classes:
        shapes.append(Shape(
            class_id=class_id,
            kind=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
            center=(float(rng.uniform(0.15 * h, 0.85 * h)), float(rng.uniform(0.15 * w, 0.85 * w))),
            axes=(float(rng.uniform(h / 10, h / 4)), float(rng.uniform(w / 10, w / 4))),
            rotation=float(rng.uniform(0.0, math.pi)),
        ))
    return SceneSpec(tuple(shapes), (h, w), num_classes)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(image) * 65535.0).astype(np.uint16)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 65535.0


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    out_dir: Path
    preset: str = "semimdg"
    seed: int = 0
    size: int = 64
    num_classes: int = 3
    labeled: int = 8
    unlabeled: int = 64
    test: int = 32
    # for umda: (source,) and (target,); for ssmis train_domains holds the single domain
    train_domains: tuple[int, ...] = (0, 1, 2)
    test_domains: tuple[int, ...] = (3,)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.train_domains = tuple(int(d) for d in self.train_domains)
        self.test_domains = tuple(int(d) for d in self.test_domains)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.labeled < 1:
            raise ConfigError("labeled count must be at least 1")
        if self.unlabeled < 0 or self.test < 0:
            raise ConfigError("unlabeled and test counts must be nonnegative")
        if self.size < MIN_SIZE:
            raise ConfigError(f"size must be at least {MIN_SIZE}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not self.train_domains:
            raise ConfigError("at least one training domain is required")
        if self.preset == "ssmis" and len(self.train_domains) != 1:
            raise ConfigError("ssmis preset uses exactly one domain")
        if self.preset == "umda" and (len(self.train_domains) != 1 or len(self.test_domains) != 1
                                      or self.train_domains == self.test_domains):
            raise ConfigError("umda preset needs one source and one distinct target domain")
        if self.preset == "semimdg":
            if not self.test_domains:
                raise ConfigError("semimdg preset needs at least one test domain")
            leaked = set(self.train_domains) & set(self.test_domains)
            if leaked:
                raise ConfigError(f"test domain(s) {sorted(leaked)} leak into training")

    def assignments(self) -> dict[str, list[int]]:
        """Domain id of every sample, per split."""
        def cycle(domains, n):
            return [domains[i % len(domains)] for i in range(n)]

        if self.preset == "ssmis":
            d = self.train_domains[0]
            return {"labeled": [d] * self.labeled, "unlabeled": [d] * self.unlabeled, "test": [d] * self.test}
        if self.preset == "umda":
            src, tgt = self.train_domains[0], self.test_domains[0]
            return {"labeled": [src] * self.labeled, "unlabeled": [tgt] * self.unlabeled, "test": [tgt] * self.test}
        return {
            "labeled": cycle(self.train_domains, self.labeled),
            "unlabeled": cycle(self.train_domains, self.unlabeled),
            "test": cycle(self.test_domains, self.test),
        }


def parse_domains(text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """``"0,1,2/3"`` -> ``((0, 1, 2), (3,))``; the part after ``/`` is optional."""
    train, _, test = text.partition("/")
    try:
        tr = tuple(int(t) for t in train.split(",") if t.strip())
        te = tuple(int(t) for t in test.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad domain spec {text!r}: {exc}") from None
    return tr, te


def _sample_seed(seed: int, split: str, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLITS.index(split), i])


def _write_png(path: Path, raw: np.ndarray):
    Image.fromarray(raw.astype(np.uint16)).save(path, format="PNG")


def build_corpus(config: CorpusConfig) -> Path:
    """Render and write a corpus; returns the manifest path."""
    config.validate()
    out = config.out_dir
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    prefix = {"labeled": "lab", "unlabeled": "unl", "test": "tst"}
    for split, domains in config.assignments().items():
        for i, domain_id in enumerate(domains):
            sample_id = f"{prefix[split]}_{i:04d}"
            scene_seq, noise_seq = _sample_seed(config.seed, split, i).spawn(2)
            scene = random_scene(np.random.default_rng(scene_seq), (config.size, config.size), config.num_classes)
            image, onehot = render_scene(scene, domain_style(domain_id), int(noise_seq.generate_state(1)[0]))
            image_path = f"images/{sample_id}.png"
            _write_png(out / image_path, quantize(image[0, 0]))
            label_path = NO_LABEL
            if split != "unlabeled":
                label_path = f"labels/{sample_id}.png"
                _write_png(out / label_path, onehot[0].argmax(axis=0))
            rows.append((sample_id, str(domain_id), split, image_path, label_path))

    lines = [
        MANIFEST_MAGIC,
        f"# preset={config.preset}",
        f"# image_size={config.size}x{config.size}",
        f"# num_classes={config.num_classes}",
        f"# seed={config.seed}",
        "\t".join(MANIFEST_COLUMNS),
    ]
    lines += ["\t".join(r) for r in rows]
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    domain_id: int
    split: str
    image_path: Path
    label_path: Path | None

    @property
    def has_label(self) -> bool:
        return self.label_path is not None


@dataclass
class CorpusIndex:
    """Parsed manifest: split membership and resolved file paths."""

    root: Path
    image_size: tuple[int, int]
    num_classes: int
    rows: dict[str, ManifestRow]
    meta: dict[str, str] = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows.values() if r.split == name]

    def ids(self, name: str) -> list[str]:
        return [r.sample_id for r in self.split(name)]

    @property
    def n_labeled(self) -> int:
        return len(self.split("labeled"))

    @property
    def n_unlabeled(self) -> int:
        return len(self.split("unlabeled"))

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def load_manifest(path: str | Path) -> CorpusIndex:
    """Parse ``manifest.tsv`` (or the corpus directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    meta: dict[str, str] = {}
    rows: dict[str, ManifestRow] = {}
    header_seen = False
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, eq, value = line[1:].strip().partition("=")
            if eq:
                meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if not header_seen:
            if tuple(fields) != MANIFEST_COLUMNS:
                raise ManifestError(f"{path}:{lineno}: expected header {MANIFEST_COLUMNS}, got {fields}")
            header_seen = True
            continue
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(fields)}")
        sample_id, domain, split, image_path, label_path = fields
        try:
            domain_id = int(domain)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: domain_id {domain!r} is not an integer") from None
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if sample_id in rows:
            raise ManifestError(f"{path}:{lineno}: duplicate sample_id {sample_id!r}")
        image_file = root / image_path
        if not image_file.exists():
            raise ManifestError(f"{path}:{lineno}: image file missing: {image_file}")
        label_file = None
        if label_path != NO_LABEL:
            label_file = root / label_path
            if not label_file.exists():
                raise ManifestError(f"{path}:{lineno}: label file missing: {label_file}")
        if split in ("labeled", "test") and label_file is None:
            raise ManifestError(f"{path}:{lineno}: {split} sample {sample_id!r} has no label")
        rows[sample_id] = ManifestRow(sample_id, domain_id, split, image_file, label_file)
    if not header_seen:
        raise ManifestError(f"{path}: no header row")
    try:
        h, w = (int(v) for v in meta["image_size"].split("x"))
        num_classes = int(meta["num_classes"])
    except (KeyError, ValueError):
        raise ManifestError(f"{path}: missing or malformed image_size/num_classes header") from None
    return CorpusIndex(root, (h, w), num_classes, rows, meta)


def read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def domains_by_split(index: CorpusIndex) -> dict[str, set[int]]:
    return {s: {r.domain_id for r in index.split(s)} for s in SPLITS}


def make_config(out_dir, preset: str, domains: str | None = None, **kwargs) -> CorpusConfig:
    """Build a CorpusConfig with preset-appropriate default domains."""
    defaults: dict[str, Sequence[int]] = {
        "ssmis": ((0,), ()),
        "umda": ((0,), (3,)),
        "semimdg": ((0, 1, 2), (3,)),
    }
    if preset not in defaults:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    train, test = parse_domains(domains) if domains else defaults[preset]
    return CorpusConfig(out_dir, preset=preset, train_domains=train, test_domains=test, **kwargs)
