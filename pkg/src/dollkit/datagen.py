"""Synthetic multi-label "radiograph" corpus with ground-truth region masks.

Every observation is bound to one shape family (ellipse, bar or blob).  A
positive observation draws one shape of its family somewhere in the image; the
shape's pixels form that observation's ground-truth plane.  Negative
observations leave their plane empty.

All randomness for a sample comes from ``SeedSequence(seed, hash(id))`` split
into independent streams (labels, geometry, background, noise), so rendering is
order-free and changing ``noise_level`` never moves a shape.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, MissingArtifactError, PlacementError
from .formats import ArtifactHeader, canonical_json, digest, read_json, write_json

SHAPE_FAMILIES = ("ellipse", "bar", "blob")
SPLITS = ("train", "val", "test")

# base intensity added inside a shape, per family
_CONTRAST = {"ellipse": 0.26, "bar": 0.34, "blob": 0.30}


@dataclass
class CorpusConfig:
    image_size: int = 64
    n_observations: int = 4
    n_train: int = 1400
    n_val: int = 300
    n_test: int = 300
    shape_palette: Optional[tuple] = None
    noise_level: float = 0.1
    seed: int = 0
    channels: int = 1
    prevalence: float = 0.45
    observation_names: Optional[tuple] = None
    shape_scale: float = 1.0       # multiplies every linear shape dimension

    def __post_init__(self):
        if self.shape_palette is not None:
            self.shape_palette = tuple(self.shape_palette)
        if self.observation_names is not None:
            self.observation_names = tuple(self.observation_names)

    @property
    def palette(self) -> tuple:
        if self.shape_palette is not None:
            return self.shape_palette
        return tuple(SHAPE_FAMILIES[c % len(SHAPE_FAMILIES)] for c in range(self.n_observations))

    @property
    def names(self) -> tuple:
        if self.observation_names is not None:
            return self.observation_names
        return tuple(f"obs{c}-{fam}" for c, fam in enumerate(self.palette))

    def split_sizes(self) -> dict:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def validate(self) -> "CorpusConfig":
        if not isinstance(self.n_observations, int) or self.n_observations < 2:
            raise ConfigError("corpus.n_observations", "need at least 2 observations")
        for split, n in self.split_sizes().items():
            if not isinstance(n, int) or n < 1:
                raise ConfigError(f"corpus.n_{split}", "must be a positive integer")
        if not isinstance(self.image_size, int) or self.image_size < 16:
            raise ConfigError("corpus.image_size", "must be an integer >= 16")
        if len(self.palette) != self.n_observations:
            raise ConfigError("corpus.shape_palette",
                              f"expected {self.n_observations} entries, got {len(self.palette)}")
        for fam in self.palette:
            if fam not in SHAPE_FAMILIES:
                raise ConfigError("corpus.shape_palette", f"unknown shape family {fam!r}")
        if len(self.names) != self.n_observations:
            raise ConfigError("corpus.observation_names", "one name per observation required")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError("corpus.noise_level", "must lie in [0, 1]")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("corpus.prevalence", "must lie in (0, 1)")
        if not 0.25 <= self.shape_scale <= 3.0:
            raise ConfigError("corpus.shape_scale", "must lie in [0.25, 3]")
        if self.channels not in (1, 3):
            raise ConfigError("corpus.channels", "must be 1 or 3")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("corpus.seed", "must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_palette"] = list(self.palette)
        d["observation_names"] = list(self.names)
        return d

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass
class ImageSample:
    id: str
    image: np.ndarray                    # H x W float32 in [0, 1], multiples of 1/255
    labels: np.ndarray                   # C, uint8 in {0, 1}
    split: str
    gt_masks: Optional[np.ndarray] = None  # C x H x W uint8, oracle only

    def as_channels(self, channels: int) -> np.ndarray:
        return np.repeat(self.image[None], channels, axis=0)


def sample_rng(seed: int, sample_id: str) -> np.random.SeedSequence:
    key = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
    return np.random.SeedSequence(entropy=seed, spawn_key=(key,))


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _place(rng, radius, size):
    lo, hi = radius + 1.0, size - 2.0 - radius
    if hi < lo:
        raise PlacementError(f"shape of radius {radius:.1f}px does not fit a {size}px image")
    return rng.uniform(lo, hi, size=2)


def _ellipse(rng, size, scale, base=1.0):
    a = max(3.0, rng.uniform(0.12, 0.20) * size * scale * base)
    b = max(2.5, rng.uniform(0.55, 0.9) * a)
    theta = rng.uniform(0, np.pi)
    cy, cx = _place(rng, a, size)
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _bar(rng, size, scale, base=1.0):
    half_len = max(4.0, rng.uniform(0.16, 0.26) * size * scale * base)
    half_w = max(1.3, rng.uniform(0.025, 0.04) * size * base)
    theta = rng.uniform(-np.pi / 5, np.pi / 5)
    cy, cx = _place(rng, np.hypot(half_len, half_w), size)
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(u) <= half_len) & (np.abs(v) <= half_w)


def _blob(rng, size, scale, base=1.0):
    r0 = max(2.5, rng.uniform(0.07, 0.10) * size * scale * base)
    n_lobes = int(rng.integers(2, 5))
    # lobes hang off the core disc within its radius, so the union is connected
    angles = rng.uniform(0, 2 * np.pi, n_lobes)
    dists = rng.uniform(0.4, 0.95, n_lobes) * r0
    radii = rng.uniform(0.5, 0.85, n_lobes) * r0
    reach = max(r0, float(np.max(dists + radii)))
    cy, cx = _place(rng, reach, size)
    yy, xx = _grid(size)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r0 ** 2
    for ang, d, r in zip(angles, dists, radii):
        ly, lx = cy + d * np.sin(ang), cx + d * np.cos(ang)
        mask |= (yy - ly) ** 2 + (xx - lx) ** 2 <= r ** 2
    return mask


_DRAW = {"ellipse": _ellipse, "bar": _bar, "blob": _blob}


def _variants(palette):
    """k-th observation sharing a family is drawn smaller and brighter."""
    seen, out = {}, []
    for fam in palette:
        out.append(seen.get(fam, 0))
        seen[fam] = seen.get(fam, 0) + 1
    return out


def _background(rng, size):
    yy, _ = _grid(size)
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    smooth /= np.abs(smooth).max() + 1e-12
    return 0.18 + 0.12 * yy / size + 0.07 * smooth


def render_sample(sample_id: str, config: CorpusConfig, rng_state: np.random.SeedSequence,
                  split: str = "train", labels: Optional[Sequence[int]] = None) -> ImageSample:
    """Render one sample. ``labels`` overrides the label draw (used by tests)."""
    size, palette = config.image_size, config.palette
    label_ss, geom_ss, bg_ss, noise_ss, tex_ss = rng_state.spawn(5)
    drawn = (np.random.default_rng(label_ss).random(len(palette)) < config.prevalence)
    labels = np.asarray(drawn if labels is None else labels, dtype=np.uint8)
    geom = np.random.default_rng(geom_ss)
    tex = np.random.default_rng(tex_ss)

    image = _background(np.random.default_rng(bg_ss), size)
    gt = np.zeros((len(palette), size, size), dtype=np.uint8)
    for c, (fam, variant) in enumerate(zip(palette, _variants(palette))):
        # geometry is drawn for every observation so that streams stay aligned
        mask = _DRAW[fam](geom, size, 0.65 ** variant, config.shape_scale)
        texture = ndimage.gaussian_filter(tex.standard_normal((size, size)), 1.0)
        if not labels[c]:
            continue
        gt[c] = mask
        image = image + mask * _CONTRAST[fam] * (1 + 0.3 * variant) * (1 + 0.25 * texture)

    image = ndimage.gaussian_filter(image, 0.6)
    image = image + config.noise_level * 0.25 * np.random.default_rng(noise_ss).standard_normal(image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return ImageSample(id=sample_id, image=image.astype(np.float32), labels=labels, split=split,
                       gt_masks=gt)


def _render_job(args):
    sample_id, config, split = args
    return render_sample(sample_id, config, sample_rng(config.seed, sample_id), split)


@dataclass
class Corpus:
    config: CorpusConfig
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def arrays(self, split: str, channels: Optional[int] = None):
        """(images N x ch x H x W float32, labels N x C float32, gt N x C x H x W uint8 or None)."""
        items = self.split(split)
        ch = channels or self.config.channels
        images = np.stack([s.image for s in items])[:, None]
        if ch > 1:
            images = np.repeat(images, ch, axis=1)
        labels = np.stack([s.labels for s in items]).astype(np.float32)
        gt = None
        if items and items[0].gt_masks is not None:
            gt = np.stack([s.gt_masks for s in items])
        return images.astype(np.float32), labels, gt

    def manifest(self) -> list:
        return [{"id": s.id, "labels": [int(v) for v in s.labels], "split": s.split}
                for s in self.samples]

    def digest(self) -> str:
        h = hashlib.sha256(self.config.digest().encode())
        for row, s in zip(self.manifest(), self.samples):
            h.update(canonical_json(row).encode())
            h.update(_to_bytes(s.image))
        return h.hexdigest()

    def gt_digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            if s.gt_masks is None:
                raise ValueError("corpus was loaded without its ground-truth sidecar")
            h.update(s.id.encode())
            h.update(np.ascontiguousarray(s.gt_masks).tobytes())
        return h.hexdigest()


def sample_ids(config: CorpusConfig):
    for split, n in config.split_sizes().items():
        for i in range(n):
            yield f"{split}-{i:05d}", split


def generate_corpus(config: CorpusConfig, jobs: int = 1) -> Corpus:
    config.validate()
    work = [(sid, config, split) for sid, split in sample_ids(config)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(_render_job, work, chunksize=64))
    else:
        samples = [_render_job(w) for w in work]
    return Corpus(config=config, samples=samples)


# --- on-disk layout -------------------------------------------------------

def _to_bytes(image: np.ndarray) -> bytes:
    return np.round(np.asarray(image) * 255.0).astype(np.uint8).tobytes()


def write_pgm(path, plane_u8: np.ndarray) -> None:
    h, w = plane_u8.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(plane_u8, np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def write_corpus(corpus: Corpus, root) -> Path:
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for s in corpus.samples:
        write_pgm(root / s.split / f"{s.id}.pgm", np.frombuffer(_to_bytes(s.image), np.uint8).reshape(s.image.shape))
        for c, plane in enumerate(s.gt_masks):
            write_pgm(root / "gt" / f"{s.id}_{c}.pgm", plane * np.uint8(255))
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for row in corpus.manifest():
            fh.write(canonical_json(row) + "\n")
    write_json(root / "corpus.json", {
        "artifact": ArtifactHeader("corpus", corpus.config.digest()).to_dict(),
        "config": corpus.config.to_dict(),
        "digest": corpus.digest(),
        "gt_digest": corpus.gt_digest(),
    })
    return root


def read_corpus(root, with_gt: bool = False) -> Corpus:
    root = Path(root)
    meta_path = root / "corpus.json"
    if not meta_path.exists():
        raise MissingArtifactError(meta_path, "corpus")
    meta = read_json(meta_path)
    config = CorpusConfig(**meta["config"])
    samples = []
    with open(root / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            img = (read_pgm(root / row["split"] / f"{row['id']}.pgm") / 255.0).astype(np.float32)
            gt = None
            if with_gt:
                gt = np.stack([(read_pgm(root / "gt" / f"{row['id']}_{c}.pgm") > 0).astype(np.uint8)
                               for c in range(config.n_observations)])
            samples.append(ImageSample(row["id"], img, np.asarray(row["labels"], np.uint8), row["split"], gt))
    return Corpus(config, samples)
