"""Procedural scenes: a labeled source domain, an unlabeled compound target
domain (hidden mixture of style-shifted sub-domains), and novel open domains.

Scenes are 32x32 RGB images containing three shape classes over a background;
class identity is carried by both geometry and a class-specific color range,
so style shifts (gamma, color cast, noise, ...) genuinely degrade a model
trained on clean scenes.  Every random draw comes from a stream keyed by
(master seed, purpose tag, sample index), making generation order-independent
and bit-reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

H = W = 32
NUM_CLASSES = 4  # background, box, disk, stripe

CLASS_NAMES = ("background", "box", "disk", "stripe")

STYLE_KINDS = ("identity", "gamma", "color_cast", "additive_noise", "desaturate", "contrast")

# stream tags; every (seed, tag, index) triple is an independent stream
_SRC, _TGT, _OPEN, _PICK, _GEOM, _NOISE = 1, 2, 3, 4, 5, 6


class DataError(ValueError):
    """Bad generation request (non-positive counts, empty compound spec, ...)."""


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int


@dataclass
class StyleTransform:
    """One appearance shift; parameters are fixed per sub-domain.

    Noise realizations are drawn from a seed supplied at apply time, so the
    transform itself stays deterministic.
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in STYLE_KINDS:
            raise DataError(f"unknown style kind {self.kind!r}")

    def apply(self, image: np.ndarray, seed: int = 0) -> np.ndarray:
        img = image
        if self.kind == "identity":
            out = img.copy()
        elif self.kind == "gamma":
            (g,) = self.params
            out = np.clip(img, 0.0, 1.0) ** g
        elif self.kind == "color_cast":
            gains = np.asarray(self.params, dtype=np.float64).reshape(3, 1, 1)
            out = img * gains
        elif self.kind == "additive_noise":
            (sigma,) = self.params
            out = img + sigma * _rng(_NOISE, seed).standard_normal(img.shape)
        elif self.kind == "desaturate":
            (rho,) = self.params
            lum = _luminance(img)[None]
            out = rho * lum + (1.0 - rho) * img
        elif self.kind == "contrast":
            (c,) = self.params
            out = (img - 0.5) * c + 0.5
        return np.clip(out, 0.0, 1.0)


@dataclass
class DomainSpec:
    name: str
    transforms: tuple  # chain of StyleTransforms, applied in order
    weight: float = 1.0

    def apply(self, scene: Scene, seed: int) -> Scene:
        img = scene.image
        for i, t in enumerate(self.transforms):
            img = t.apply(img, seed=seed * 131 + i)
        return Scene(image=img, labels=scene.labels)


def _luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def scene_geometry(master_seed: int, index: int, stream: int) -> dict:
    """Shape geometry for one scene, from its own stream (re-derivable by tests)."""
    rng = _rng(master_seed, _GEOM, stream, index)
    geom = {}

    bw, bh = int(rng.integers(6, 13)), int(rng.integers(6, 13))
    bx = int(rng.integers(1, 13 - 1))
    by = int(rng.integers(1, 13 - 1))
    geom["box"] = (bx, by, bw, bh)

    r = int(rng.integers(4, 8))
    cx = int(rng.integers(W // 2 + 2, W - r - 1))
    cy = int(rng.integers(H // 2 + 2, H - r - 1))
    geom["disk"] = (cx, cy, r)

    slope = float(rng.uniform(-0.7, 0.7))
    offset = float(rng.uniform(0.25, 0.75) * H)
    half_width = float(rng.uniform(1.2, 2.4))
    geom["stripe"] = (slope, offset, half_width)
    return geom


def rasterize(geom: dict) -> np.ndarray:
    """Labels from geometry.  Priority on overlap: disk > box > stripe > background."""
    yy, xx = np.mgrid[0:H, 0:W]
    bx, by, bw, bh = geom["box"]
    cx, cy, r = geom["disk"]
    slope, offset, half_width = geom["stripe"]

    labels = np.zeros((H, W), dtype=np.int64)
    labels[np.abs(yy - (slope * xx + offset)) <= half_width] = 3
    labels[(xx >= bx) & (xx < bx + bw) & (yy >= by) & (yy < by + bh)] = 1
    labels[(xx - cx) ** 2 + (yy - cy) ** 2 <= r**2] = 2
    return labels


def gen_scene(master_seed: int, index: int = 0, stream: int = 0) -> Scene:
    """Deterministic clean scene for (master_seed, stream, index)."""
    rng = _rng(master_seed, stream, index)

    base = rng.uniform(0.15, 0.3)
    grad = rng.uniform(-0.08, 0.08)
    yy = np.linspace(0.0, 1.0, H)[:, None] * np.ones((1, W))
    bg = np.stack([base + grad * yy] * 3) + rng.uniform(-0.02, 0.02, size=(3, 1, 1))

    def rand_color(lead):
        c = rng.uniform(0.05, 0.3, size=3)
        c[lead] = rng.uniform(0.55, 0.9)
        return c

    colors = {1: rand_color(0), 2: rand_color(1), 3: rand_color(2)}
    labels = rasterize(scene_geometry(master_seed, index, stream))

    img = bg
    for cls in (1, 2, 3):
        img = np.where((labels == cls)[None], colors[cls].reshape(3, 1, 1), img)
    img = img + 0.015 * rng.standard_normal(img.shape)  # sensor-ish texture
    return Scene(image=np.clip(img, 0.0, 1.0), labels=labels)


def apply_style(scene: Scene, spec: DomainSpec, seed: int = 0) -> Scene:
    """Style-shift a scene; labels are untouched by construction."""
    return spec.apply(scene, seed)


IDENTITY_DOMAIN = DomainSpec("clean", (StyleTransform("identity"),))


def default_compound_specs() -> list[DomainSpec]:
    return [
        DomainSpec("bright", (StyleTransform("gamma", (0.5,)),), 1 / 3),
        DomainSpec("bluecast", (StyleTransform("color_cast", (0.75, 0.85, 1.6)),), 1 / 3),
        DomainSpec("noisy", (StyleTransform("additive_noise", (0.08,)),), 1 / 3),
    ]


def default_open_specs() -> list[DomainSpec]:
    # a combination unseen during training; parameters disjoint from every
    # compound transform
    return [
        DomainSpec(
            "washed",
            (StyleTransform("desaturate", (0.65,)), StyleTransform("contrast", (1.5,))),
        )
    ]


@dataclass
class Split:
    """One dataset split: images always, labels/provenance only when unsealed."""

    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray | None = None  # (N, H, W)
    provenance: list[str] | None = None  # true generating sub-domain per sample


@dataclass
class DatasetBundle:
    source: Split
    target: Split  # images only; the sealed twin lives in eval_only
    open_sets: dict[str, Split]  # images only
    eval_only: dict[str, Split]  # "target", plus one entry per open set
    manifest: dict = field(default_factory=dict)


def make_dataset(
    source_count: int,
    target_count: int,
    open_count: int,
    seed: int,
    compound_specs: list[DomainSpec] | None = None,
    open_specs: list[DomainSpec] | None = None,
) -> DatasetBundle:
    """Generate all splits.  Target labels and provenance are produced but
    handed back only through ``eval_only``; training code receives the bare
    image splits."""
    if min(source_count, target_count, open_count) <= 0:
        raise DataError("split counts must be positive")
    compound_specs = compound_specs if compound_specs is not None else default_compound_specs()
    open_specs = open_specs if open_specs is not None else default_open_specs()
    if not compound_specs:
        raise DataError("compound spec list is empty")
    weights = np.array([s.weight for s in compound_specs], dtype=np.float64)
    if not np.isclose(weights.sum(), 1.0):
        raise DataError(f"compound weights must sum to 1, got {weights.sum()}")

    src_imgs, src_labels = [], []
    for i in range(source_count):
        sc = apply_style(gen_scene(seed, i, _SRC), IDENTITY_DOMAIN, seed=i)
        src_imgs.append(sc.image)
        src_labels.append(sc.labels)
    source = Split(np.stack(src_imgs), np.stack(src_labels))

    tgt_imgs, tgt_labels, tgt_prov = [], [], []
    for i in range(target_count):
        sub = int(_rng(seed, _PICK, i).choice(len(compound_specs), p=weights))
        sc = apply_style(gen_scene(seed, i, _TGT), compound_specs[sub], seed=i)
        tgt_imgs.append(sc.image)
        tgt_labels.append(sc.labels)
        tgt_prov.append(compound_specs[sub].name)
    target = Split(np.stack(tgt_imgs))
    sealed = {"target": Split(target.images, np.stack(tgt_labels), tgt_prov)}

    open_sets = {}
    for j, spec in enumerate(open_specs):
        imgs, labels = [], []
        for i in range(open_count):
            sc = apply_style(gen_scene(seed, i + j * open_count, _OPEN), spec, seed=i)
            imgs.append(sc.image)
            labels.append(sc.labels)
        open_sets[spec.name] = Split(np.stack(imgs))
        sealed[f"open:{spec.name}"] = Split(
            np.stack(imgs), np.stack(labels), [spec.name] * open_count
        )

    manifest = {
        "seed": seed,
        "counts": {"source": source_count, "target": target_count, "open": open_count},
        "image_hw": [H, W],
        "num_classes": NUM_CLASSES,
        "compound": [_spec_dict(s) for s in compound_specs],
        "open": [_spec_dict(s) for s in open_specs],
    }
    return DatasetBundle(source, target, open_sets, sealed, manifest)


def _spec_dict(spec: DomainSpec) -> dict:
    return {
        "name": spec.name,
        "weight": spec.weight,
        "transforms": [{"kind": t.kind, "params": list(t.params)} for t in spec.transforms],
    }


def _spec_from_dict(d: dict) -> DomainSpec:
    return DomainSpec(
        d["name"],
        tuple(StyleTransform(t["kind"], tuple(t["params"])) for t in d["transforms"]),
        d.get("weight", 1.0),
    )


def specs_from_manifest(manifest: dict) -> tuple[list[DomainSpec], list[DomainSpec]]:
    return (
        [_spec_from_dict(d) for d in manifest["compound"]],
        [_spec_from_dict(d) for d in manifest["open"]],
    )


# -- on-disk layout ----------------------------------------------------------------
#
# data_dir/
#   manifest.json
#   source_images.npy, source_labels.npy
#   target_images.npy
#   open_<name>_images.npy
#   eval_only/
#     target_labels.npy, target_provenance.csv
#     open_<name>_labels.npy
#
# Everything under eval_only/ belongs to the evaluation harness; training
# code must only read the top-level files.


def save_dataset(bundle: DatasetBundle, data_dir) -> None:
    root = Path(data_dir)
    sealed_dir = root / "eval_only"
    sealed_dir.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True))
    np.save(root / "source_images.npy", bundle.source.images)
    np.save(root / "source_labels.npy", bundle.source.labels)
    np.save(root / "target_images.npy", bundle.target.images)
    for name, split in bundle.open_sets.items():
        np.save(root / f"open_{name}_images.npy", split.images)

    np.save(sealed_dir / "target_labels.npy", bundle.eval_only["target"].labels)
    with open(sealed_dir / "target_provenance.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", "domain"])
        for i, dom in enumerate(bundle.eval_only["target"].provenance):
            wr.writerow([i, dom])
    for name in bundle.open_sets:
        np.save(sealed_dir / f"open_{name}_labels.npy", bundle.eval_only[f"open:{name}"].labels)


def load_dataset(data_dir, with_sealed: bool = False) -> DatasetBundle:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    source = Split(np.load(root / "source_images.npy"), np.load(root / "source_labels.npy"))
    target = Split(np.load(root / "target_images.npy"))
    open_sets = {}
    for p in sorted(root.glob("open_*_images.npy")):
        name = p.name[len("open_") : -len("_images.npy")]
        open_sets[name] = Split(np.load(p))

    eval_only = {}
    if with_sealed:
        sealed_dir = root / "eval_only"
        prov = []
        with open(sealed_dir / "target_provenance.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                prov.append(row["domain"])
        eval_only["target"] = Split(
            target.images, np.load(sealed_dir / "target_labels.npy"), prov
        )
        for name in open_sets:
            eval_only[f"open:{name}"] = Split(
                open_sets[name].images,
                np.load(sealed_dir / f"open_{name}_labels.npy"),
                [name] * len(open_sets[name].images),
            )
    return DatasetBundle(source, target, open_sets, eval_only, manifest)
