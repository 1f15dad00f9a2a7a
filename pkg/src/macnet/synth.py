"""Procedural material patches with known generative traits.

Each category is a small bundle of texture parameters. A patch is built in a
fixed order (flat colour, stripes, speckle, gloss highlights, roughness
noise, blur, clamp) from a per-patch seed, so every image in a corpus can be
regenerated exactly.
"""
from __future__ import annotations

import colorsys
import json
import math
import operator
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .percept import SimilarityJudgments

PATCH_SIZE = 32
STRIPE_AMPLITUDE = 0.35
SPLITS = ("train", "val", "test")

# normalisation ranges for the perceptual oracle's parameter vector
PARAM_RANGES = {
    "hue_center": 1.0,
    "hue_width": 0.5,
    "saturation": 1.0,
    "value": 1.0,
    "stripe_freq": 8.0,
    "speckle": 0.3,
    "roughness": 0.3,
    "gloss": 4.0,
    "fuzz": 2.0,
}

_OPS = {">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt}


@dataclass(frozen=True)
class CategorySpec:
    """Generative parameters of one synthetic material category.

    ``stripe_freq`` counts cycles per 32 pixels, ``speckle`` is the fraction of
    speckled pixels, ``gloss`` the expected number of highlights per 32x32
    area, ``roughness`` the noise amplitude and ``fuzz`` the blur sigma in
    pixels.
    """

    name: str
    path: tuple  # (top, mid, fine)
    hue: tuple = (0.0, 0.0)
    saturation: float = 0.0
    value: float = 0.5
    stripe_freq: float = 0.0
    stripe_angle: float = 0.0
    speckle: float = 0.0
    roughness: float = 0.0
    gloss: float = 0.0
    fuzz: float = 0.0

    def __post_init__(self):
        if len(self.path) != 3:
            raise ValueError(f"{self.name}: hierarchy path needs 3 levels, got {self.path}")
        lo, hi = self.hue
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"{self.name}: hue range {self.hue} outside [0, 1]")
        for key in ("saturation", "value"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"{self.name}: {key} outside [0, 1]")
        for key in ("stripe_freq", "speckle", "roughness", "gloss", "fuzz"):
            v = getattr(self, key)
            if not 0.0 <= v <= PARAM_RANGES[key]:
                raise ValueError(f"{self.name}: {key}={v} outside [0, {PARAM_RANGES[key]}]")

    def vector(self) -> np.ndarray:
        """Parameters scaled to [0, 1] for the distance oracle."""
        raw = {
            "hue_center": 0.5 * (self.hue[0] + self.hue[1]),
            "hue_width": self.hue[1] - self.hue[0],
            "saturation": self.saturation,
            "value": self.value,
            "stripe_freq": self.stripe_freq,
            "speckle": self.speckle,
            "roughness": self.roughness,
            "gloss": self.gloss,
            "fuzz": self.fuzz,
        }
        return np.array([raw[k] / PARAM_RANGES[k] for k in PARAM_RANGES])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path"] = list(self.path)
        d["hue"] = list(self.hue)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CategorySpec":
        d = dict(d)
        d["path"] = tuple(d["path"])
        d["hue"] = tuple(d.get("hue", (0.0, 0.0)))
        return cls(**d)


def default_categories() -> list:
    """Eight categories: two families, two mid-level groups each, two leaves each."""
    return [
        CategorySpec("polished_steel", ("manmade", "metal", "polished_steel"),
                     hue=(0.55, 0.62), saturation=0.08, value=0.70, gloss=2.5, roughness=0.02),
        CategorySpec("brushed_aluminum", ("manmade", "metal", "brushed_aluminum"),
                     hue=(0.55, 0.62), saturation=0.05, value=0.60, stripe_freq=6.0,
                     roughness=0.06, gloss=1.2, fuzz=0.3),
        CategorySpec("striped_cotton", ("manmade", "fabric", "striped_cotton"),
                     hue=(0.55, 0.70), saturation=0.70, value=0.70, stripe_freq=3.0,
                     stripe_angle=45.0, roughness=0.04, fuzz=1.0),
        CategorySpec("wool_felt", ("manmade", "fabric", "wool_felt"),
                     hue=(0.95, 1.0), saturation=0.60, value=0.50, speckle=0.05,
                     roughness=0.15, fuzz=1.6),
        CategorySpec("granite", ("natural", "stone", "granite"),
                     hue=(0.05, 0.12), saturation=0.10, value=0.50, speckle=0.25, roughness=0.20),
        CategorySpec("marble", ("natural", "stone", "marble"),
                     hue=(0.10, 0.15), saturation=0.05, value=0.85, stripe_freq=1.0,
                     stripe_angle=120.0, roughness=0.03, gloss=1.5, fuzz=0.5),
        CategorySpec("foliage", ("natural", "organic", "foliage"),
                     hue=(0.25, 0.38), saturation=0.75, value=0.45, speckle=0.15,
                     roughness=0.18, fuzz=0.4),
        CategorySpec("bark", ("natural", "organic", "bark"),
                     hue=(0.05, 0.10), saturation=0.50, value=0.35, stripe_freq=2.0,
                     stripe_angle=90.0, speckle=0.10, roughness=0.25, fuzz=0.6),
    ]


# traits ------------------------------------------------------------------------

def load_trait_table(version: int = 1) -> dict:
    text = resources.files("macnet").joinpath(f"data/traits_v{version}.json").read_text()
    return json.loads(text)


def trait_names(table: Optional[dict] = None) -> list:
    return list((table or load_trait_table())["traits"])


def category_traits(spec: CategorySpec, table: Optional[dict] = None) -> np.ndarray:
    """Binary trait vector of a category, in trait-table order."""
    table = table or load_trait_table()
    bits = []
    for rule in table["traits"].values():
        bits.append(all(_OPS[op](getattr(spec, key), thr) for key, op, thr in rule["all"]))
    return np.array(bits, dtype=np.int64)


def trait_matrix(categories: Sequence[CategorySpec], table: Optional[dict] = None) -> np.ndarray:
    return np.stack([category_traits(c, table) for c in categories])


# seeds -------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(corpus_seed: int, index: int) -> int:
    """Per-item seed; distinct indices give distinct seeds for a fixed corpus seed."""
    return splitmix64((splitmix64(corpus_seed & _MASK64) + index * 0x9E3779B97F4A7C15) & _MASK64) >> 1


# generation --------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    for sigma, weight in ((1.0, 0.5), (2.0, 0.3), (4.0, 0.2)):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        std = layer.std()
        if std > 0:
            out += weight * layer / std
    return out


def gen_patch(spec: CategorySpec, seed: int, size: int = PATCH_SIZE) -> np.ndarray:
    """Render a (3, size, size) texture in [0, 1] for ``spec``."""
    rng = np.random.default_rng(seed)
    hue = rng.uniform(*spec.hue) if spec.hue[1] > spec.hue[0] else spec.hue[0]
    rgb = np.array(colorsys.hsv_to_rgb(hue % 1.0, spec.saturation, spec.value))
    img = np.broadcast_to(rgb[:, None, None], (3, size, size)).copy()

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if spec.stripe_freq > 0:
        theta = math.radians(spec.stripe_angle)
        u = xx * math.cos(theta) + yy * math.sin(theta)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img *= 1.0 + STRIPE_AMPLITUDE * np.sin(2.0 * math.pi * spec.stripe_freq * u / PATCH_SIZE + phase)

    if spec.speckle > 0:
        mask = rng.random((size, size)) < spec.speckle
        img[:, mask] *= 0.35

    if spec.gloss > 0:
        n_blobs = rng.poisson(spec.gloss * (size / PATCH_SIZE) ** 2)
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, size, 2)
            sigma = rng.uniform(1.5, 3.5)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img += (1.0 - img) * 0.85 * blob

    if spec.roughness > 0:
        img += spec.roughness * _value_noise(rng, size)

    if spec.fuzz > 0:
        img = np.stack([ndimage.gaussian_filter(ch, spec.fuzz, mode="reflect") for ch in img])

    return np.clip(img, 0.0, 1.0)


def gen_composite(left: CategorySpec, right: CategorySpec, seed: int, size: int = 128):
    """Two-region image (left half / right half) and its integer region mask."""
    a = gen_patch(left, derive_seed(seed, 0), size)
    b = gen_patch(right, derive_seed(seed, 1), size)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[:, size // 2:] = 1
    return np.where(mask[None] == 0, a, b), mask


def to_uint8(patch: np.ndarray) -> np.ndarray:
    return np.round(np.clip(patch, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, patch: np.ndarray) -> None:
    Image.fromarray(to_uint8(patch).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


# corpus ------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    categories: list = field(default_factory=default_categories)
    counts: dict = field(default_factory=lambda: {"train": 400, "val": 100, "test": 100})
    seed: int = 0
    patch_size: int = PATCH_SIZE


def plan_corpus(cfg: CorpusConfig) -> dict:
    """Manifest entries without touching the filesystem."""
    table = load_trait_table()
    traits = trait_matrix(cfg.categories, table)
    splits = {}
    index = 0
    for split in SPLITS:
        n = int(cfg.counts.get(split, 0))
        if n < 1:
            raise ValueError(f"split {split!r} needs at least one patch per category")
        entries = []
        for label in range(len(cfg.categories)):
            for _ in range(n):
                seed = derive_seed(cfg.seed, index)
                index += 1
                entries.append({
                    "file": f"patches/{split}/{label}_{seed}.png",
                    "label": label,
                    "traits": traits[label].tolist(),
                    "seed": seed,
                })
        splits[split] = entries
    return {
        "version": 1,
        "seed": cfg.seed,
        "patch_size": cfg.patch_size,
        "trait_table_version": table["version"],
        "trait_names": trait_names(table),
        "categories": [c.to_dict() for c in cfg.categories],
        "splits": splits,
    }


def gen_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Write PNG patches and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    manifest = plan_corpus(cfg)
    try:
        for split in SPLITS:
            (out / "patches" / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    for split in SPLITS:
        for e in manifest["splits"][split]:
            patch = gen_patch(cfg.categories[e["label"]], e["seed"], cfg.patch_size)
            save_png(out / e["file"], patch)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


@dataclass
class Split:
    X: np.ndarray  # (n, 3, P, P)
    y: np.ndarray
    traits: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "Split":
        return Split(self.X[mask], self.y[mask], self.traits[mask], self.seeds[mask])


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {corpus_dir}")
    return json.loads(path.read_text())


def load_split(corpus_dir, split: str, manifest: Optional[dict] = None) -> Split:
    manifest = manifest or load_manifest(corpus_dir)
    entries = manifest["splits"][split]
    X = np.stack([load_png(Path(corpus_dir) / e["file"]) for e in entries])
    return Split(
        X,
        np.array([e["label"] for e in entries], dtype=np.int64),
        np.array([e["traits"] for e in entries], dtype=np.int64),
        np.array([e["seed"] for e in entries], dtype=np.uint64),
    )


def render_split(manifest: dict, split: str) -> Split:
    """Rebuild a split in memory (values quantised exactly as the PNG files)."""
    cats = [CategorySpec.from_dict(c) for c in manifest["categories"]]
    entries = manifest["splits"][split]
    size = manifest["patch_size"]
    X = np.stack([to_uint8(gen_patch(cats[e["label"]], e["seed"], size)) / 255.0 for e in entries])
    return Split(
        X.astype(np.float64),
        np.array([e["label"] for e in entries], dtype=np.int64),
        np.array([e["traits"] for e in entries], dtype=np.int64),
        np.array([e["seed"] for e in entries], dtype=np.uint64),
    )


# perceptual oracle -------------------------------------------------------------

def true_dissimilarity(categories: Sequence[CategorySpec]) -> np.ndarray:
    """Normalised L2 distance between category parameter vectors, in [0, 1]."""
    V = np.stack([c.vector() for c in categories])
    diff = V[:, None, :] - V[None, :, :]
    return np.sqrt((diff ** 2).sum(-1) / V.shape[1])


def oracle_judgments(categories: Sequence[CategorySpec], annotators: int = 50,
                     noise: float = 0.1, seed: int = 0) -> SimilarityJudgments:
    """Simulated yes/no answers: each annotator says "no" w.p. clamp(delta + U(-noise, noise))."""
    if annotators < 1:
        raise ValueError("need at least one annotator")
    if not 0.0 <= noise < 0.5:
        raise ValueError(f"noise must lie in [0, 0.5), got {noise}")
    delta = true_dissimilarity(categories)
    rng = np.random.default_rng(seed)
    k = len(categories)
    out = SimilarityJudgments(k)
    for a in range(k):
        for b in range(a + 1, k):
            p_no = np.clip(delta[a, b] + rng.uniform(-noise, noise, annotators), 0.0, 1.0)
            no = int((rng.random(annotators) < p_no).sum())
            out.add(a, b, annotators - no, no)
    return out
