"""Class splits and the synthetic zero-shot segmentation benchmark."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from joem.embedding import SemanticTable, load_table
from joem.errors import InvalidInput, InvalidParameter, UnknownClass
from joem.formats import atomic_write, load_pgm, load_tensors, save_pgm, save_tensors


@dataclass(frozen=True)
class SplitSpec:
    seen: frozenset
    unseen: frozenset
    background: int = 0

    def __init__(self, seen, unseen, background=0):
        object.__setattr__(self, "seen", frozenset(int(c) for c in seen))
        object.__setattr__(self, "unseen", frozenset(int(c) for c in unseen))
        object.__setattr__(self, "background", int(background))
        if self.seen & self.unseen:
            raise InvalidInput(f"seen and unseen overlap: {sorted(self.seen & self.unseen)}")
        if self.background not in self.seen:
            raise InvalidInput(f"background class {self.background} must be seen")
        if len(self.seen) < 2:
            raise InvalidInput("a split needs at least two seen classes")

    @property
    def all_classes(self) -> list[int]:
        return sorted(self.seen | self.unseen)

    @property
    def seen_sorted(self) -> list[int]:
        return sorted(self.seen)

    @property
    def unseen_sorted(self) -> list[int]:
        return sorted(self.unseen)

    def is_unseen(self, ids) -> np.ndarray:
        return np.isin(ids, self.unseen_sorted)

    def to_dict(self) -> dict:
        return {"seen": self.seen_sorted, "unseen": self.unseen_sorted,
                "background": self.background}

    @classmethod
    def from_dict(cls, d) -> "SplitSpec":
        return cls(d["seen"], d["unseen"], d.get("background", 0))


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # (H, W, Cin)
    mask: np.ndarray  # (H, W) int64


MIXINGS = ("gaussian", "isometric")


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    in_channels: int = 6
    regions: int = 5
    min_area: int = 80
    noise: float = 0.35
    distortion: float = 0.3
    seed: int = 0
    geometry: str = "voronoi"
    background_regions: int = 1
    blur: float = 0.0
    mixing: str = "isometric"

    def __post_init__(self):
        for name in ("height", "width", "in_channels", "regions"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_area < 0 or self.noise < 0 or self.distortion < 0 or self.blur < 0:
            raise InvalidParameter("min_area, noise, distortion and blur must be non-negative")
        if self.geometry not in ("voronoi", "rectangles"):
            raise InvalidParameter(f"unknown region geometry {self.geometry!r}")
        if self.mixing not in MIXINGS:
            raise InvalidParameter(f"unknown mixing {self.mixing!r}; expected one of {MIXINGS}")
        if not 0 <= self.background_regions <= self.regions:
            raise InvalidParameter("background_regions must lie in [0, regions]")

    def to_dict(self) -> dict:
        return asdict(self)


def gen_semantic_table(num_classes: int, dim: int, seed: int = 0,
                       spreads=(0.45, 1.2), rank: int | None = 6,
                       residual: float = 0.0) -> SemanticTable:
    """Unit-norm class vectors with a built-in similarity structure.

    Classes ``c`` and ``c + ceil(K/2)`` share a group centre, so every class
    in the upper half has a sibling in the lower half. Groups alternate
    between tight (close siblings) and loose spreads. Like real word
    vectors the table has low effective rank: all vectors lie in a random
    ``rank``-dimensional subspace (``None`` uses the full space), plus an
    isotropic component of relative size ``residual`` that leaves it.
    """
    if dim < 2:
        raise InvalidParameter(f"semantic dimension must be >= 2, got {dim}")
    if num_classes < 1:
        raise InvalidParameter("need at least one class")
    k = dim if rank is None else min(int(rank), dim)
    if k < 2:
        raise InvalidParameter(f"semantic rank must be >= 2, got {rank}")
    rng = np.random.default_rng([seed, 7])
    n_groups = -(-num_classes // 2)
    centres = rng.standard_normal((n_groups, k))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    noise = rng.standard_normal((num_classes, k)) / np.sqrt(k)
    basis = np.linalg.qr(rng.standard_normal((dim, k)))[0] if k < dim else np.eye(dim)
    outside = rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
    vectors = {}
    for c in range(num_classes):
        g = c % n_groups
        v = centres[g] + spreads[g % len(spreads)] * noise[c]
        v = basis @ (v / np.linalg.norm(v)) + residual * outside[c]
        vectors[c] = v / np.linalg.norm(v)
    names = {c: ("background" if c == 0 else f"class{c:02d}") for c in range(num_classes)}
    return SemanticTable(vectors, names)


def with_background(table: SemanticTable, background: int = 0, seed: int = 0) -> SemanticTable:
    """Return ``table``, adding a synthetic unit vector for ``background`` if it is missing."""
    if background in table:
        return table
    rng = np.random.default_rng([seed, 13])
    v = rng.standard_normal(table.dim)
    vectors = dict(zip(table.ids, table.matrix(table.ids)))
    vectors[int(background)] = v / np.linalg.norm(v)
    names = dict(table.names)
    names[int(background)] = "background"
    return SemanticTable(vectors, names)


@dataclass
class SceneWorld:
    """Hidden generative parameters: ``pixel = mixing @ s_c + distortion[c] + noise``."""

    mixing: np.ndarray  # (Cin, D)
    distortion: dict

    @classmethod
    def from_spec(cls, spec: SceneSpec, table: SemanticTable) -> "SceneWorld":
        rng = np.random.default_rng([spec.seed, 11])
        # drawn in both modes so the distortion stream does not depend on the mode
        mixing = rng.standard_normal((spec.in_channels, table.dim)) * np.sqrt(2.0 / table.dim)
        distortion = {}
        for c in table.ids:
            d = rng.standard_normal(spec.in_channels)
            distortion[c] = spec.distortion * d / np.linalg.norm(d)
        if spec.mixing == "isometric":
            mixing = isometric_mixing(table, spec.in_channels, np.random.default_rng([spec.seed, 12]))
        return cls(mixing, distortion)


def isometric_mixing(table: SemanticTable, channels: int, rng: np.random.Generator) -> np.ndarray:
    """``(channels, D)`` map that preserves distances within the table's span.

    The leading right singular vectors of the table are rotated onto random
    orthonormal channel directions, so visual similarity between classes
    mirrors semantic similarity. When the span has more dimensions than
    ``channels``, only the leading ones survive.
    """
    vecs = table.matrix(table.ids)
    _, sv, vt = np.linalg.svd(vecs, full_matrices=False)
    k = min(channels, int(np.sum(sv > 1e-8 * sv[0])))
    q, _ = np.linalg.qr(rng.standard_normal((channels, k)))
    return q @ vt[:k]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of the two leading axes with replicated borders.

    Models the optics of a camera: pixels near a region boundary see a mix
    of both sides, which is the situation boundary-aware targets address.
    """
    rad = max(1, int(math.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-rad, rad + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = image
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (rad, rad)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        out = sum(t * np.take(padded, np.arange(k, k + n), axis=axis) for k, t in enumerate(taps))
    return out


def _voronoi_labels(h, w, sites):
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d, axis=0)


def _rectangle_labels(h, w, n, rng):
    cells = np.zeros((h, w), dtype=np.intp)
    for k in range(1, n):
        rh = int(rng.integers(h // 4, h // 2 + 1))
        rw = int(rng.integers(w // 4, w // 2 + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        cells[top:top + rh, left:left + rw] = k
    return cells


def gen_scene(spec: SceneSpec, table: SemanticTable, classes, rng: np.random.Generator,
              world: SceneWorld | None = None, require=None, max_tries: int = 50) -> Sample:
    """Draw one labelled scene over ``classes``.

    The canvas is split into ``spec.regions`` cells; the first
    ``background_regions`` cells are background (when it is among
    ``classes``), one cell takes a class from ``require`` if given, the rest
    are drawn uniformly from the non-background classes.
    """
    classes = sorted(int(c) for c in classes)
    missing = [c for c in classes if c not in table]
    if missing:
        raise UnknownClass(missing[0])
    world = world or SceneWorld.from_spec(spec, table)
    h, w = spec.height, spec.width
    background = 0 if 0 in classes else None
    fg = [c for c in classes if c != background] or classes
    require = sorted(int(c) for c in require) if require else None

    for _ in range(max_tries):
        if spec.geometry == "voronoi":
            sites = np.stack([rng.integers(0, h, spec.regions), rng.integers(0, w, spec.regions)], axis=1)
            cells = _voronoi_labels(h, w, sites)
        else:
            cells = _rectangle_labels(h, w, spec.regions, rng)
        areas = np.bincount(cells.ravel(), minlength=spec.regions)
        present = areas > 0
        if spec.geometry == "voronoi" and areas.min() < spec.min_area:
            continue
        if spec.geometry == "rectangles" and areas[present].min() < spec.min_area:
            continue
        cell_class = rng.choice(fg, size=spec.regions)
        n_bg = spec.background_regions if background is not None else 0
        if n_bg:
            cell_class[:n_bg] = background
        if require:
            visible = [k for k in range(n_bg, spec.regions) if present[k]] or [int(np.argmax(areas))]
            cell_class[visible[0]] = rng.choice(require)
        mask = np.asarray(cell_class, dtype=np.int64)[cells]
        break
    else:
        raise InvalidParameter(
            f"could not satisfy min_area={spec.min_area} with {spec.regions} regions "
            f"after {max_tries} tries")

    ids, inverse = np.unique(mask, return_inverse=True)
    clean = table.matrix(ids.tolist()) @ world.mixing.T \
        + np.stack([world.distortion[int(c)] for c in ids])
    image = clean[inverse.reshape(mask.shape)]
    if spec.blur:
        image = gaussian_blur(image, spec.blur)
    if spec.noise:
        image = image + spec.noise * rng.standard_normal(image.shape)
    return Sample(image, mask)


def make_benchmark(spec: SceneSpec, table: SemanticTable, split: SplitSpec, n_train: int,
                   n_test: int, seed: int | None = None):
    """Train scenes over seen classes only; every test scene shows an unseen class.

    Each sample has its own seed spawned from ``seed`` (default
    ``spec.seed``), so the result is a pure function of the arguments.
    """
    if n_train < 0 or n_test < 0:
        raise InvalidParameter("sample counts must be non-negative")
    seed = spec.seed if seed is None else seed
    world = SceneWorld.from_spec(spec, table)
    train_seqs = np.random.SeedSequence([seed, 0]).spawn(n_train)
    test_seqs = np.random.SeedSequence([seed, 1]).spawn(n_test)
    train_set = [gen_scene(spec, table, split.seen, np.random.default_rng(s), world)
                 for s in train_seqs]
    test_set = [gen_scene(spec, table, split.all_classes, np.random.default_rng(s), world,
                          require=split.unseen)
                for s in test_seqs]
    return train_set, test_set


def default_split(num_classes: int = 12, n_unseen: int = 4) -> SplitSpec:
    """Background 0, the last ``n_unseen`` class ids unseen."""
    if not 0 < n_unseen <= num_classes - 3:
        raise InvalidParameter(f"cannot hold out {n_unseen} of {num_classes} classes")
    unseen = range(num_classes - n_unseen, num_classes)
    return SplitSpec(range(num_classes - n_unseen), unseen, 0)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    spec: SceneSpec
    split: SplitSpec
    table: SemanticTable
    train: list
    test: list
    meta: dict


def save_dataset(out_dir, spec: SceneSpec, split: SplitSpec, table: SemanticTable,
                 train: list, test: list, extra_meta: dict | None = None) -> None:
    """Write ``meta.json``, ``table.txt`` and ``{train,test}/NNNN.{bin,pgm}``."""
    out_dir = Path(out_dir)
    for sub in ("train", "test"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
        for stale in (out_dir / sub).glob("*"):
            if stale.suffix in (".bin", ".pgm"):
                stale.unlink()
    for sub, samples in (("train", train), ("test", test)):
        for i, sample in enumerate(samples):
            save_tensors(out_dir / sub / f"{i:04d}.bin", {"image": sample.image})
            save_pgm(out_dir / sub / f"{i:04d}.pgm", sample.mask)
    table.save(out_dir / "table.txt")
    meta = {"format": "joem-dataset", "version": 1, "scene": spec.to_dict(),
            "split": split.to_dict(), "n_train": len(train), "n_test": len(test)}
    meta.update(extra_meta or {})
    with atomic_write(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_samples(folder: Path, n: int) -> list:
    samples = []
    for i in range(n):
        image = load_tensors(folder / f"{i:04d}.bin")["image"]
        mask = load_pgm(folder / f"{i:04d}.pgm")
        if image.shape[:2] != mask.shape:
            raise InvalidInput(f"{folder}/{i:04d}: image and mask sizes differ")
        samples.append(Sample(image, mask))
    return samples


def load_dataset(path, which=("train", "test")) -> Dataset:
    path = Path(path)
    try:
        with open(path / "meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise InvalidInput(f"{path} is not a dataset directory (no meta.json)") from None
    if meta.get("format") != "joem-dataset":
        raise InvalidInput(f"{path}/meta.json is not a joem dataset description")
    spec = SceneSpec(**meta["scene"])
    split = SplitSpec.from_dict(meta["split"])
    table = load_table(path / "table.txt")
    train = _load_samples(path / "train", meta["n_train"]) if "train" in which else []
    test = _load_samples(path / "test", meta["n_test"]) if "test" in which else []
    return Dataset(spec, split, table, train, test, meta)
