"""Synthetic cardiac-like phantoms standing in for registered atlas sets.

Each subject is a bright annulus (foreground) around a mid-grey pool on a
smooth random texture. Its "warped atlases" are the same scene resampled
through a smooth integer displacement field (translation + small rotation
+ low-frequency sinusoid), then re-contrasted and re-noised. The
displacement magnitude is truncated at ``min(3 * misalignment, max_shift)``
so a search window with ``t >= max_shift`` always holds the true match.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dfnt
from .feature_net import Image, LabelMap
from .nlplf import Atlas


@dataclass
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    center_jitter: float = 3.0
    inner_radius: tuple[float, float] = (8.0, 12.0)
    outer_radius: tuple[float, float] = (15.0, 20.0)
    misalignment: float = 2.0
    max_shift: int = 3
    contrast_jitter: float = 0.25
    noise: float = 0.04
    texture: float = 0.12
    subjects: int = 10
    test_subjects: int = 0
    atlases: int = 9
    seed: int = 0
    spacing_mm: tuple[float, float] = (1.25, 1.25)

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.inner_radius = tuple(float(r) for r in self.inner_radius)
        self.outer_radius = tuple(float(r) for r in self.outer_radius)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if min(self.inner_radius) <= 0 or self.inner_radius[0] > self.inner_radius[1]:
            raise ValueError(f"bad inner radius range {self.inner_radius}")
        if self.outer_radius[0] > self.outer_radius[1] or self.inner_radius[1] >= self.outer_radius[0]:
            raise ValueError("inner radii must all be below outer radii")
        if self.misalignment < 0 or self.max_shift < 0:
            raise ValueError("misalignment and max_shift must be nonnegative")
        if self.subjects + self.test_subjects < 1 or self.atlases < 1:
            raise ValueError("need at least one subject and one atlas")

    @property
    def shift_cap(self) -> float:
        return min(3.0 * self.misalignment, float(self.max_shift))

    def check_window(self, t: int) -> None:
        if self.max_shift > t:
            raise ValueError(f"phantom misalignment cap {self.max_shift} exceeds search half-width {t}")


@dataclass
class Subject:
    id: str
    target: Image
    label: LabelMap
    atlases: list[Atlas]
    split: str = "train"
    displacements: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class Dataset:
    subjects: list[Subject]
    spec: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Subject]:
        return [s for s in self.subjects if s.split == name]

    def by_id(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(f"no subject {sid!r} in dataset")


def _scene(spec: PhantomSpec, rng: np.random.Generator):
    """Clean intensity scene and integer class raster for one subject."""
    h, w = spec.size
    center = np.array([(h - 1) / 2, (w - 1) / 2]) + rng.normal(0, spec.center_jitter, 2)
    r_in = rng.uniform(*spec.inner_radius)
    r_out = max(rng.uniform(*spec.outer_radius), r_in + 2.0)
    ecc = rng.uniform(0.9, 1.1)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    radius = np.hypot((rr - center[0]) * ecc, (cc - center[1]) / ecc)
    classes = ((radius >= r_in) & (radius < r_out)).astype(np.int64)

    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), 2.5)
    texture /= texture.std() + 1e-12
    scene = 0.3 + spec.texture * texture
    scene = np.where(radius < r_in, 0.55 + 0.3 * spec.texture * texture, scene)
    scene = np.where(classes == 1, 0.9 + 0.15 * spec.texture * texture, scene)
    scene = ndimage.gaussian_filter(scene, 0.6)
    return scene, classes, center


def displacement_field(spec: PhantomSpec, rng: np.random.Generator, center) -> np.ndarray:
    """Integer (H, W, 2) field ``u``; the atlas pixel q shows scene position q + u(q)."""
    h, w = spec.size
    sigma = spec.misalignment
    trans = rng.normal(0, sigma, 2)
    theta = rng.normal(0, 0.02 * sigma)
    amp = rng.normal(0, 0.5 * sigma, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    u = np.empty((h, w, 2))
    u[..., 0] = trans[0] + (np.cos(theta) - 1) * dr - np.sin(theta) * dc + amp[0] * np.sin(2 * np.pi * cc / w + phase[0])
    u[..., 1] = trans[1] + np.sin(theta) * dr + (np.cos(theta) - 1) * dc + amp[1] * np.sin(2 * np.pi * rr / h + phase[1])
    cap = spec.shift_cap
    u_int = np.rint(u)
    norm = np.hypot(u_int[..., 0], u_int[..., 1])
    over = norm > cap
    if np.any(over):
        scaled = u[over] * (cap / np.maximum(np.hypot(u[over][:, 0], u[over][:, 1]), 1e-12))[:, None]
        u_int[over] = np.trunc(scaled)
    return u_int.astype(np.int64)


def warp(raster: np.ndarray, u: np.ndarray) -> np.ndarray:
    h, w = raster.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    src_r = np.clip(rr + u[..., 0], 0, h - 1)
    src_c = np.clip(cc + u[..., 1], 0, w - 1)
    return raster[src_r, src_c]


def _acquire(scene: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Random gamma/gain/offset plus additive noise."""
    j = spec.contrast_jitter
    gamma = np.exp(rng.normal(0, j))
    gain = np.exp(rng.normal(0, j / 2))
    offset = rng.normal(0, j / 4)
    img = gain * np.clip(scene, 0, None) ** gamma + offset
    return (img + rng.normal(0, spec.noise, scene.shape)).astype(np.float32)


def render_subject(spec: PhantomSpec, rng: np.random.Generator, sid: str, split: str = "train") -> Subject:
    scene, classes, center = _scene(spec, rng)
    target = Image(_acquire(scene, spec, rng), spec.spacing_mm)
    label = LabelMap.from_mask(classes)
    atlases, fields = [], []
    for a in range(spec.atlases):
        u = displacement_field(spec, rng, center)
        img = Image(_acquire(warp(scene, u), spec, rng), spec.spacing_mm)
        atlases.append(Atlas(img, LabelMap.from_mask(warp(classes, u)), f"{sid}_a{a:02d}"))
        fields.append(u)
    return Subject(sid, target, label, atlases, split, fields)


def render(spec: PhantomSpec) -> Dataset:
    """Build the whole dataset in memory; per-subject seeds derive from ``spec.seed``."""
    total = spec.subjects + spec.test_subjects
    seeds = np.random.SeedSequence(spec.seed).spawn(total)
    subjects = []
    for i, ss in enumerate(seeds):
        split = "train" if i < spec.subjects else "test"
        subjects.append(render_subject(spec, np.random.default_rng(ss), f"s{i:03d}", split))
    return Dataset(subjects, _spec_dict(spec))


def graded_set(spec: PhantomSpec, magnitudes, seed: int = 0, plant_identical: bool = False):
    """One target plus atlases translated by the given magnitudes (pixels, random direction).

    Returns ``(target, label, atlases)``. With ``plant_identical`` a
    bit-identical copy of the target is appended as the last atlas.
    """
    rng = np.random.default_rng(seed)
    scene, classes, _ = _scene(spec, rng)
    target = Image(_acquire(scene, spec, rng), spec.spacing_mm)
    h, w = spec.size
    atlases = []
    for i, m in enumerate(magnitudes):
        ang = rng.uniform(0, 2 * np.pi)
        u = np.zeros((h, w, 2), dtype=np.int64)
        u[..., 0] = int(np.rint(m * np.cos(ang)))
        u[..., 1] = int(np.rint(m * np.sin(ang)))
        img = Image(_acquire(warp(scene, u), spec, rng), spec.spacing_mm)
        atlases.append(Atlas(img, LabelMap.from_mask(warp(classes, u)), f"g{i:02d}"))
    if plant_identical:
        atlases.append(Atlas(Image(target.pixels.copy(), spec.spacing_mm), LabelMap.from_mask(classes), "twin"))
    return target, LabelMap.from_mask(classes), atlases


def _spec_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def generate(spec: PhantomSpec, out_dir: str | os.PathLike) -> dict:
    """Render the dataset and write DFNT rasters plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = render(spec)
    subjects = []
    for s in data.subjects:
        sdir = out / s.id
        sdir.mkdir(exist_ok=True)
        dfnt.write(sdir / "target_image.dfnt", s.target.pixels)
        dfnt.write(sdir / "target_label.dfnt", s.label.probs)
        entries = []
        for a, u in zip(s.atlases, s.displacements):
            dfnt.write(sdir / f"{a.id}_image.dfnt", a.image.pixels)
            dfnt.write(sdir / f"{a.id}_label.dfnt", a.label.probs)
            dfnt.write(sdir / f"{a.id}_disp.dfnt", u)
            entries.append({"id": a.id, "image": f"{s.id}/{a.id}_image.dfnt",
                            "label": f"{s.id}/{a.id}_label.dfnt", "displacement": f"{s.id}/{a.id}_disp.dfnt"})
        subjects.append({"id": s.id, "split": s.split, "spacing_mm": list(s.target.spacing_mm),
                         "target_image": f"{s.id}/target_image.dfnt",
                         "target_label": f"{s.id}/target_label.dfnt", "atlases": entries})
    manifest = {"format": "deepfusion-dataset", "version": 1, "seed": spec.seed,
                "spec": data.spec, "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _load_raster(root: Path, rel: str, ndim: int) -> np.ndarray:
    path = root / rel
    if not path.exists():
        raise FileNotFoundError(f"manifest references missing file {path}")
    arr = dfnt.read(path)
    if arr.ndim != ndim:
        raise ValueError(f"{path}: expected a {ndim}D tensor, got shape {arr.shape}")
    return arr


def _load_label(root: Path, rel: str, shape) -> LabelMap:
    probs = _load_raster(root, rel, 3)
    if probs.shape[:2] != tuple(shape):
        raise ValueError(f"{root / rel}: label shape {probs.shape[:2]} != image shape {tuple(shape)}")
    return LabelMap(probs).validate(name=str(root / rel))


def load_manifest(path: str | os.PathLike) -> Dataset:
    """Read a dataset manifest, validating every raster it references."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    root = path.parent
    subjects = []
    for entry in manifest["subjects"]:
        spacing = tuple(entry.get("spacing_mm", (1.0, 1.0)))
        target = Image(_load_raster(root, entry["target_image"], 2), spacing)
        label = _load_label(root, entry["target_label"], target.shape)
        atlases, fields = [], []
        for a in entry["atlases"]:
            img = _load_raster(root, a["image"], 2)
            if img.shape != target.shape:
                raise ValueError(f"{root / a['image']}: atlas shape {img.shape} != target shape {target.shape}")
            atlases.append(Atlas(Image(img, spacing), _load_label(root, a["label"], target.shape), a.get("id", "")))
            if "displacement" in a and (root / a["displacement"]).exists():
                fields.append(dfnt.read(root / a["displacement"]).astype(np.int64))
        subjects.append(Subject(entry["id"], target, label, atlases, entry.get("split", "train"), fields))
    return Dataset(subjects, manifest.get("spec", {}))


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def oracle_unwarp(atlas_label: LabelMap, u: np.ndarray) -> LabelMap:
    """Map an atlas label back onto the target grid using its true displacement field.

    Each atlas pixel q is sent to q + u(q); target pixels no atlas pixel
    lands on take the label at p - u(p).
    """
    probs = atlas_label.probs
    h, w = probs.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    out = probs[np.clip(rr - u[..., 0], 0, h - 1), np.clip(cc - u[..., 1], 0, w - 1)].copy()
    out[np.clip(rr + u[..., 0], 0, h - 1), np.clip(cc + u[..., 1], 0, w - 1)] = probs
    return LabelMap(out)
