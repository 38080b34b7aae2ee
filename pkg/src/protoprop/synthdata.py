"""Procedural attribute/object images and seen/unseen compositional splits.

Images are 32x32 RGB: a dark uniform-noise background with one colored
shape stencil.  Colors play the role of attributes and shapes the role of
objects, so every image carries exactly one (attribute, object) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConstraintError, ContractError
from .tensorio import load_tensors, save_tensors

IMAGE_SIZE = 32
NOISE_AMPLITUDE = 0.15
HUE_JITTER = 0.08
RADIUS_RANGE = (6.0, 12.0)
TINT_STRENGTH = 0.25

DEFAULT_ATTRIBUTES = (
    ("red", (0.90, 0.10, 0.10)),
    ("purple", (0.55, 0.15, 0.75)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("blue", (0.10, 0.20, 0.90)),
    ("green", (0.10, 0.70, 0.15)),
    ("cyan", (0.10, 0.80, 0.85)),
    ("gray", (0.55, 0.55, 0.55)),
    ("brown", (0.55, 0.30, 0.08)),
)
DEFAULT_OBJECTS = (("sphere", "circle"), ("cube", "square"), ("cylinder", "triangle"))
STENCILS = ("circle", "square", "triangle", "diamond", "ring", "cross")

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class PrimitiveVocab:
    attributes: tuple  # names
    colors: tuple  # RGB triples aligned with attributes
    objects: tuple  # names
    stencils: tuple  # stencil names aligned with objects

    def __post_init__(self):
        if len(self.attributes) < 2 or len(self.objects) < 2:
            raise ContractError("need at least two attributes and two objects")
        if len(set(self.attributes)) != len(self.attributes) or len(set(self.objects)) != len(self.objects):
            raise ContractError("primitive names must be unique")
        if len(self.colors) != len(self.attributes) or len(self.stencils) != len(self.objects):
            raise ContractError("colors/stencils must align with names")
        for s in self.stencils:
            if s not in STENCILS:
                raise ContractError(f"unknown stencil {s!r}")

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_objs(self) -> int:
        return len(self.objects)

    @property
    def n_pairs(self) -> int:
        return self.n_attrs * self.n_objs

    def pair_index(self, attr: int, obj: int) -> int:
        """Row-major index of (attr, obj) in the full A x O grid."""
        return attr * self.n_objs + obj

    def to_dict(self) -> dict:
        return {
            "attributes": [[n, list(c)] for n, c in zip(self.attributes, self.colors)],
            "objects": [[n, s] for n, s in zip(self.objects, self.stencils)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveVocab":
        return cls(
            attributes=tuple(a[0] for a in d["attributes"]),
            colors=tuple(tuple(a[1]) for a in d["attributes"]),
            objects=tuple(o[0] for o in d["objects"]),
            stencils=tuple(o[1] for o in d["objects"]),
        )


def default_vocab(n_attrs: int = 8, n_objs: int = 3) -> PrimitiveVocab:
    """The 8-color x 3-shape vocabulary, truncated or extended as requested."""
    if n_attrs > len(DEFAULT_ATTRIBUTES):
        raise ContractError(f"at most {len(DEFAULT_ATTRIBUTES)} built-in colors")
    if n_objs > len(STENCILS):
        raise ContractError(f"at most {len(STENCILS)} built-in stencils")
    attrs = DEFAULT_ATTRIBUTES[:n_attrs]
    objs = list(DEFAULT_OBJECTS[:n_objs])
    for extra in STENCILS[len(objs) : n_objs]:
        objs.append((extra, extra))
    return PrimitiveVocab(
        attributes=tuple(a for a, _ in attrs),
        colors=tuple(c for _, c in attrs),
        objects=tuple(o for o, _ in objs),
        stencils=tuple(s for _, s in objs),
    )


@dataclass(frozen=True)
class CompositionalLabel:
    attr: int
    obj: int

    def validate(self, vocab: PrimitiveVocab) -> None:
        if not (0 <= self.attr < vocab.n_attrs and 0 <= self.obj < vocab.n_objs):
            raise ContractError(f"label {self} outside vocabulary bounds")


@dataclass(frozen=True)
class SplitSpec:
    unseen: int = 2
    seen: int = 8
    seed: int = 0
    n_train: int = 50  # per seen composition
    n_val: int = 20  # per composition
    n_test: int = 20
    bias_mode: bool = False

    def __post_init__(self):
        if self.unseen < 0 or self.seen < 0 or self.unseen + self.seen == 0:
            raise ContractError("ratio must be two nonnegative integers, not both zero")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ContractError("sample counts must be nonnegative")

    def unseen_count(self, n_pairs: int) -> int:
        return int(np.floor(n_pairs * self.unseen / (self.unseen + self.seen) + 0.5))


@dataclass
class Sample:
    image: np.ndarray  # (32, 32, 3) in [0, 1]
    attr: int
    obj: int
    comp: int  # index into the A x O grid

    @property
    def label(self) -> CompositionalLabel:
        return CompositionalLabel(self.attr, self.obj)


@dataclass
class SplitData:
    """Samples of one split stored as arrays."""

    images: np.ndarray  # (N, 32, 32, 3)
    attrs: np.ndarray  # (N,) int
    objs: np.ndarray
    comps: np.ndarray  # grid index attr * |O| + obj

    def __len__(self):
        return len(self.attrs)

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.attrs[i]), int(self.objs[i]), int(self.comps[i]))


@dataclass
class Dataset:
    vocab: PrimitiveVocab
    seen: list  # sorted grid indices, Y_s
    unseen: list  # sorted grid indices, Y_u
    train: SplitData
    val: SplitData
    test: SplitData
    split: SplitSpec = field(default_factory=SplitSpec)

    @property
    def compositions(self) -> list[CompositionalLabel]:
        """All A x O pairs in grid order."""
        return [CompositionalLabel(a, o) for a in range(self.vocab.n_attrs) for o in range(self.vocab.n_objs)]

    def unseen_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab.n_pairs, dtype=bool)
        mask[list(self.unseen)] = True
        return mask

    def validate(self) -> None:
        check_dataset(self)


# rendering


def _stencil_mask(kind: str, cy: float, cx: float, r: float, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        h = r / np.sqrt(2.0) * 1.2
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "triangle":
        # upward triangle inscribed in the radius-r circle
        top, bottom = cy - r, cy + 0.5 * r
        half = (yy - top) / (bottom - top) * r * np.sqrt(3.0) / 2.0
        return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= half)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = 0.35 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ContractError(f"unknown stencil {kind!r}")


def object_tint(obj: int) -> np.ndarray:
    """Background tint assigned to an object in bias mode (hash of the index)."""
    digest = hashlib.sha256(f"object-tint-{obj}".encode()).digest()
    rgb = np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64) / 255.0
    return TINT_STRENGTH * rgb


def render_sample(
    label: CompositionalLabel,
    vocab: PrimitiveVocab,
    rng: np.random.Generator,
    tint: Optional[np.ndarray] = None,
) -> Sample:
    """Draw one image of ``label``; ``tint`` (RGB) is added to the background."""
    label.validate(vocab)
    size = IMAGE_SIZE
    img = rng.uniform(0.0, NOISE_AMPLITUDE, size=(size, size, 3))
    if tint is not None:
        img = img + np.asarray(tint, dtype=np.float64)
    r = rng.uniform(*RADIUS_RANGE)
    margin = min(r, size / 2 - 1)
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _stencil_mask(vocab.stencils[label.obj], cy, cx, r)
    color = np.asarray(vocab.colors[label.attr]) + rng.uniform(-HUE_JITTER, HUE_JITTER, size=3)
    img[mask] = color
    img = np.clip(img, 0.0, 1.0)
    return Sample(img, label.attr, label.obj, vocab.pair_index(label.attr, label.obj))


def sample_rng(seed: int, split: str, comp: int, index: int) -> np.random.Generator:
    """Per-sample generator derived from the master seed, independent of order."""
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODES[split], comp, index]))


# splits


def covers_primitives(vocab: PrimitiveVocab, seen: Sequence[int]) -> bool:
    attrs = {c // vocab.n_objs for c in seen}
    objs = {c % vocab.n_objs for c in seen}
    return len(attrs) == vocab.n_attrs and len(objs) == vocab.n_objs


def build_splits(vocab: PrimitiveVocab, split: SplitSpec, max_tries: int = 2000) -> tuple[list, list]:
    """Random (Y_s, Y_u) over the A x O grid with every primitive seen.

    Assignments are drawn uniformly and rejected until coverage holds.  If
    ``max_tries`` draws all fail (only for very tight ratios) a random
    minimal edge cover is completed with uniformly drawn extra seen pairs.
    """
    n = vocab.n_pairs
    n_unseen = split.unseen_count(n)
    bound = n - max(vocab.n_attrs, vocab.n_objs)
    if n_unseen > bound:
        raise ConstraintError(
            f"{n_unseen} unseen of {n} compositions leaves {n - n_unseen} seen, but covering "
            f"{vocab.n_attrs} attributes and {vocab.n_objs} objects needs at least "
            f"max(|A|, |O|) = {max(vocab.n_attrs, vocab.n_objs)} seen compositions"
        )
    rng = np.random.default_rng(np.random.SeedSequence([split.seed, 0x5EE1]))
    n_seen = n - n_unseen
    seen = None
    for _ in range(max_tries):
        perm = rng.permutation(n)
        if covers_primitives(vocab, perm[:n_seen]):
            seen = perm[:n_seen]
            break
    if seen is None:
        seen = _cover_then_fill(vocab, n_seen, rng)
    seen_list = sorted(int(c) for c in seen)
    unseen_list = sorted(set(range(n)) - set(seen_list))
    return seen_list, unseen_list


def _cover_then_fill(vocab: PrimitiveVocab, n_seen: int, rng: np.random.Generator) -> np.ndarray:
    a, o = vocab.n_attrs, vocab.n_objs
    big, small = max(a, o), min(a, o)
    # every row of the larger side gets one partner; the smaller side is hit at least once
    partners = np.concatenate([rng.permutation(small), rng.integers(0, small, size=big - small)])
    rng.shuffle(partners)
    if a >= o:
        cover = {vocab.pair_index(i, int(partners[i])) for i in range(a)}
    else:
        cover = {vocab.pair_index(int(partners[j]), j) for j in range(o)}
    rest = [c for c in rng.permutation(vocab.n_pairs) if c not in cover]
    return np.array(sorted(cover) + [int(c) for c in rest[: n_seen - len(cover)]])


# datasets


def _render_split(vocab, comps, per_class, seed, split_name, tint_fn) -> SplitData:
    n = len(comps) * per_class
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 3))
    attrs = np.empty(n, dtype=np.int64)
    objs = np.empty(n, dtype=np.int64)
    k = 0
    for comp in comps:
        label = CompositionalLabel(comp // vocab.n_objs, comp % vocab.n_objs)
        for i in range(per_class):
            rng = sample_rng(seed, split_name, comp, i)
            tint = tint_fn(label, rng) if tint_fn is not None else None
            s = render_sample(label, vocab, rng, tint)
            images[k], attrs[k], objs[k] = s.image, s.attr, s.obj
            k += 1
    return SplitData(images, attrs, objs, attrs * vocab.n_objs + objs)


def generate_dataset(vocab: PrimitiveVocab, split: SplitSpec) -> Dataset:
    """Render train (seen only), val and test (seen and unseen) splits."""
    seen, unseen = build_splits(vocab, split)
    every = sorted(seen + unseen)
    train_tint = eval_tint = None
    if split.bias_mode:
        train_tint = lambda label, rng: object_tint(label.obj)  # noqa: E731
        eval_tint = lambda label, rng: object_tint(int(rng.integers(vocab.n_objs)))  # noqa: E731
    ds = Dataset(
        vocab=vocab,
        seen=seen,
        unseen=unseen,
        train=_render_split(vocab, seen, split.n_train, split.seed, "train", train_tint),
        val=_render_split(vocab, every, split.n_val, split.seed, "val", eval_tint),
        test=_render_split(vocab, every, split.n_test, split.seed, "test", eval_tint),
        split=split,
    )
    check_dataset(ds)
    return ds


def check_dataset(ds: Dataset) -> None:
    """Raise ContractError if any dataset invariant fails."""
    seen, unseen = set(ds.seen), set(ds.unseen)
    if seen & unseen:
        raise ContractError(f"seen and unseen overlap: {sorted(seen & unseen)}")
    if seen | unseen != set(range(ds.vocab.n_pairs)):
        raise ContractError("seen and unseen do not partition the composition grid")
    if not covers_primitives(ds.vocab, ds.seen):
        raise ContractError("some primitive never occurs in a seen composition")
    for name in ("train", "val", "test"):
        part: SplitData = getattr(ds, name)
        if len(part) and (part.images.min() < 0 or part.images.max() > 1):
            raise ContractError(f"{name} images outside [0, 1]")
        if np.any(part.comps != part.attrs * ds.vocab.n_objs + part.objs):
            raise ContractError(f"{name} compositional labels disagree with primitive labels")
    if len(ds.train) and not set(ds.train.comps.tolist()) <= seen:
        raise ContractError("training split contains unseen compositions")


# files


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    s = ds.split
    meta = {
        "format": "protoprop-dataset/1",
        "vocab": ds.vocab.to_dict(),
        "seen": ds.seen,
        "unseen": ds.unseen,
        "ratio": [s.unseen, s.seen],
        "seed": s.seed,
        "bias_mode": s.bias_mode,
        "per_class": {"train": s.n_train, "val": s.n_val, "test": s.n_test},
        "counts": {name: len(getattr(ds, name)) for name in ("train", "val", "test")},
        "blobs": {name: f"{name}.ppt" for name in ("train", "val", "test")},
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name in ("train", "val", "test"):
        part: SplitData = getattr(ds, name)
        labels = np.stack([part.attrs, part.objs, part.comps], axis=1).astype(np.float64)
        save_tensors(directory / f"{name}.ppt", [part.images, labels.reshape(-1, 3)])
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ContractError(f"no dataset manifest at {meta_path}")
    meta = json.loads(meta_path.read_text())
    vocab = PrimitiveVocab.from_dict(meta["vocab"])
    parts = {}
    for name in ("train", "val", "test"):
        images, labels = load_tensors(directory / meta["blobs"][name])
        labels = labels.astype(np.int64).reshape(-1, 3)
        images = images.reshape(-1, IMAGE_SIZE, IMAGE_SIZE, 3)
        parts[name] = SplitData(images, labels[:, 0], labels[:, 1], labels[:, 2])
        if len(parts[name]) != meta["counts"][name]:
            raise ContractError(f"{name}: manifest count {meta['counts'][name]} != {len(parts[name])}")
    per = meta["per_class"]
    split = SplitSpec(
        unseen=meta["ratio"][0],
        seen=meta["ratio"][1],
        seed=meta["seed"],
        n_train=per["train"],
        n_val=per["val"],
        n_test=per["test"],
        bias_mode=meta["bias_mode"],
    )
    ds = Dataset(vocab, list(meta["seen"]), list(meta["unseen"]), parts["train"], parts["val"], parts["test"], split)
    check_dataset(ds)
    return ds
