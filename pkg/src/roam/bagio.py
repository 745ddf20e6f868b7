"""Patch-bag persistence, dataset manifests, subsampling, and the synthetic slide generator.

A bag is one slide: N patch embeddings, their 2D coordinates, and a slide label.
On disk everything is little-endian float32; compute code upcasts to float64.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

BAG_MAGIC = b"ROAMBAG1"
BAG_VERSION = 1
# magic(8) + version(4) + N(4) + d_in(4) + label(4) + reserved(12)
BAG_HEADER_SIZE = 36

VALID_SPLITS = ("train", "val", "test")


class BagIOError(Exception):
    """Base class for bag file problems."""


class BadMagic(BagIOError):
    """File does not start with the ROAMBAG1 magic (or has an unknown version)."""


class TruncatedBag(BagIOError):
    """File ends before the payload promised by the header."""


class DimensionMismatch(BagIOError):
    """Header dimensions disagree with the payload size or are invalid."""


class ManifestError(Exception):
    """Malformed dataset manifest."""


@dataclass
class PatchBag:
    slide_id: str
    embeddings: np.ndarray  # (N, d_in) float32
    coords: np.ndarray  # (N, 2) float32
    label: int

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_in(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("embeddings must be a non-empty (N, d_in) matrix")
        if self.coords.shape != (self.embeddings.shape[0], 2):
            raise ValueError("coords must be (N, 2) and row-paired with embeddings")
        if not np.all(np.isfinite(self.embeddings)) or not np.all(np.isfinite(self.coords)):
            raise ValueError("bag contains non-finite entries")


def write_bag(bag: PatchBag, path) -> None:
    bag.validate()
    emb = np.ascontiguousarray(bag.embeddings, dtype="<f4")
    coo = np.ascontiguousarray(bag.coords, dtype="<f4")
    header = struct.pack(
        "<8sIIIi12x", BAG_MAGIC, BAG_VERSION, bag.n_patches, bag.d_in, int(bag.label)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(emb.tobytes())
        f.write(coo.tobytes())


def read_bag(path, slide_id: str | None = None) -> PatchBag:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < BAG_HEADER_SIZE:
        raise TruncatedBag(f"{path}: file shorter than the {BAG_HEADER_SIZE}-byte header")
    magic, version, n, d_in, label = struct.unpack_from("<8sIIIi", data, 0)
    if magic != BAG_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if n < 1 or d_in < 1:
        raise DimensionMismatch(f"{path}: header declares N={n}, d_in={d_in}")
    payload = 4 * n * (d_in + 2)
    if len(data) < BAG_HEADER_SIZE + payload:
        raise TruncatedBag(
            f"{path}: expected {payload} payload bytes, found {len(data) - BAG_HEADER_SIZE}"
        )
    if len(data) > BAG_HEADER_SIZE + payload:
        raise DimensionMismatch(f"{path}: {len(data) - BAG_HEADER_SIZE - payload} trailing bytes")
    emb = np.frombuffer(data, dtype="<f4", count=n * d_in, offset=BAG_HEADER_SIZE)
    coo = np.frombuffer(data, dtype="<f4", count=n * 2, offset=BAG_HEADER_SIZE + 4 * n * d_in)
    return PatchBag(
        slide_id=slide_id if slide_id is not None else path.stem,
        embeddings=emb.reshape(n, d_in).copy(),
        coords=coo.reshape(n, 2).copy(),
        label=label,
    )


def subsample_bag(bag: PatchBag, max_n: int, seed: int) -> PatchBag:
    """Uniform without-replacement subsample via a seeded index shuffle; no-op if N <= max_n."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if bag.n_patches <= max_n:
        return bag
    rng = np.random.default_rng(seed)
    idx = rng.permutation(bag.n_patches)[:max_n]
    return replace(bag, embeddings=bag.embeddings[idx], coords=bag.coords[idx])


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> PatchBag:
        bag = read_bag(self.resolve(entry), slide_id=entry.slide_id)
        if bag.label != entry.label:
            warnings.warn(
                f"{entry.slide_id}: bag header label {bag.label} != manifest label "
                f"{entry.label}; manifest wins"
            )
            bag = replace(bag, label=entry.label)
        return bag


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slide_id", "path", "label", "split"])
        for e in manifest.entries:
            w.writerow([e.slide_id, e.path, e.label, e.split])


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["slide_id", "path", "label", "split"]:
            raise ManifestError(f"{path}: bad header {reader.fieldnames}")
        entries = []
        for row in reader:
            if row["split"] not in VALID_SPLITS:
                raise ManifestError(f"{path}: bad split {row['split']!r}")
            entries.append(
                ManifestEntry(row["slide_id"], row["path"], int(row["label"]), row["split"])
            )
    ids = [e.slide_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate slide_ids")
    manifest = DatasetManifest(entries=entries, root=path.parent)
    if check_paths:
        for e in entries:
            if not manifest.resolve(e).exists():
                raise ManifestError(f"{path}: unresolvable path {e.path} for {e.slide_id}")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic slides


@dataclass
class SynthSpec:
    """Generator for spatially structured synthetic slides.

    Patches sit on a jittered grid in the unit square. The square is carved into
    Voronoi cells; each cell draws one morphology archetype from the label's
    allowed set, so adjacent patches share an archetype by construction.
    """

    n_slides_per_class: int
    n_classes: int = 2
    d_in: int = 32
    n_archetypes: int = 4
    patches_range: tuple[int, int] = (128, 256)
    n_cells: int = 8
    separation: float = 6.0
    noise: float = 1.0
    class_rule: dict[int, list[int]] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_slides_per_class < 1:
            raise ValueError("need at least one slide per class")
        if self.n_archetypes < self.n_classes:
            raise ValueError("archetype count must be >= number of classes")
        if self.noise < 0:
            raise ValueError("noise scale must be nonnegative")
        lo, hi = self.patches_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad patches_range {self.patches_range}")
        if self.n_cells < 1:
            raise ValueError("need at least one Voronoi cell")
        for c, arche in self.rule().items():
            if not (0 <= c < self.n_classes):
                raise ValueError(f"class_rule key {c} out of range")
            if not arche or any(not (0 <= a < self.n_archetypes) for a in arche):
                raise ValueError(f"class_rule for class {c} references bad archetypes")

    def rule(self) -> dict[int, list[int]]:
        if self.class_rule is not None:
            return self.class_rule
        return {
            c: [a for a in range(self.n_archetypes) if a % self.n_classes == c]
            for c in range(self.n_classes)
        }

    def archetype_means(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        scale = self.separation / math.sqrt(2 * self.d_in)
        return rng.normal(0.0, scale, size=(self.n_archetypes, self.d_in))


def gen_synthetic_slide(spec: SynthSpec, cls: int, seed: int) -> PatchBag:
    spec.validate()
    rule = spec.rule()
    if cls not in rule:
        raise ValueError(f"class {cls} not covered by the class rule")
    means = spec.archetype_means()
    rng = np.random.default_rng([spec.seed, cls, seed])

    lo, hi = spec.patches_range
    n = int(rng.integers(lo, hi + 1))
    side = math.ceil(math.sqrt(n))
    cells = np.arange(n)
    gx = (cells % side + 0.5) / side
    gy = (cells // side + 0.5) / side
    jitter = rng.uniform(-0.35 / side, 0.35 / side, size=(n, 2))
    coords = np.stack([gx, gy], axis=1) + jitter

    sites = rng.uniform(0.0, 1.0, size=(spec.n_cells, 2))
    cell_arch = rng.choice(rule[cls], size=spec.n_cells)
    d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    arch = cell_arch[np.argmin(d2, axis=1)]

    emb = means[arch] + spec.noise * rng.normal(size=(n, spec.d_in))
    return PatchBag(
        slide_id=f"synth-c{cls}-s{seed}",
        embeddings=emb.astype(np.float32),
        coords=coords.astype(np.float32),
        label=cls,
    )
