"""Convolutional feature extractor and attribute/object prototype layers.

Feature maps are NHWC.  Most functions accept a batch of maps of shape
(B, H, W, C); the spatial grid is flattened to B x (H*W) patches internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .errors import ContractError, ShapeError
from .numgrad import Tensor

ATTRIBUTE = "attribute"
OBJECT = "object"


@dataclass
class FeatureExtractor:
    """Three stride-2 conv stages, ReLU between stages but not after the last."""

    weights: list  # Tensor (3, 3, C_in, C_out) per stage
    biases: list  # Tensor (C_out,) per stage
    stride: int = 2
    padding: int = 1

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(3, 32, 64, 64), kernel: int = 3) -> "FeatureExtractor":
        if kernel % 2 != 1:
            raise ContractError("kernel size must be odd")
        weights, biases = [], []
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            fan_in = kernel * kernel * cin
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, cin, cout))
            weights.append(Tensor(w, requires_grad=True, name=f"conv{i}.weight"))
            biases.append(Tensor(np.zeros(cout), requires_grad=True, name=f"conv{i}.bias"))
        return cls(weights, biases, padding=kernel // 2)

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[-1]

    def parameters(self) -> list:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, images) -> Tensor:
        return extract_features(images, self)


@dataclass
class PrototypeSet:
    prototypes: Tensor  # (k, C)
    kind: str = ATTRIBUTE

    @classmethod
    def init(cls, k: int, dim: int, kind: str, rng: np.random.Generator) -> "PrototypeSet":
        if kind not in (ATTRIBUTE, OBJECT):
            raise ContractError(f"unknown prototype kind {kind!r}")
        p = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(k, dim))
        return cls(Tensor(p, requires_grad=True, name=f"{kind}.prototypes"), kind)

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def extract_features(images, fe: FeatureExtractor) -> Tensor:
    """(B, 32, 32, 3) images (or a single (32, 32, 3) image) -> (B, 4, 4, C) map."""
    x = ng.as_tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    n = len(fe.weights)
    for i, (w, b) in enumerate(zip(fe.weights, fe.biases)):
        x = ng.conv2d(x, w, stride=fe.stride, padding=fe.padding) + b
        if i < n - 1:
            x = ng.relu(x)
    return x[0] if single else x


def _patches(fm) -> Tensor:
    """(B, H, W, C) -> (B, H*W, C); a single (H, W, C) map gets B = 1."""
    fm = ng.as_tensor(fm)
    if fm.ndim == 3:
        fm = fm.reshape((1,) + fm.shape)
    if fm.ndim != 4:
        raise ShapeError(f"feature map must be (B, H, W, C), got {fm.shape}")
    b, h, w, c = fm.shape
    return fm.reshape(b, h * w, c)


def similarity_map(fm, ps: PrototypeSet) -> Tensor:
    """Dot products of every patch with every prototype, shaped (..., H, W, k)."""
    fm = ng.as_tensor(fm)
    if fm.shape[-1] != ps.dim:
        raise ShapeError(f"feature width {fm.shape[-1]} != prototype width {ps.dim}")
    return fm @ ps.prototypes.T


def compat_scores(sm) -> Tensor:
    """Max over the spatial grid: (..., H, W, k) -> (..., k).

    The gradient flows to the first maximal patch in row-major order.
    """
    sm = ng.as_tensor(sm)
    lead, (h, w, k) = sm.shape[:-3], sm.shape[-3:]
    return sm.reshape(lead + (h * w, k)).max(axis=-2)


def _check_labels(labels, k: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"label out of range for {k} classes: {y.tolist()}")
    return y


def ce_loss(s, y) -> Tensor:
    """Mean of -log softmax(s)[y]; ``s`` is (k,) or (B, k)."""
    s = ng.as_tensor(s)
    if s.ndim == 1:
        s = s.reshape(1, s.shape[0])
    y = _check_labels(y, s.shape[1])
    if len(y) != s.shape[0]:
        raise ShapeError(f"{len(y)} labels for {s.shape[0]} score rows")
    picked = s[np.arange(len(y)), y]
    return (ng.logsumexp(s, axis=1) - picked).mean()


def _sq_distances(fm, ps: PrototypeSet) -> Tensor:
    """(B, H*W, k) squared L2 distances between patches and prototypes."""
    x = _patches(fm)
    diff = x.reshape(x.shape[0], x.shape[1], 1, x.shape[2]) - ps.prototypes.reshape(1, 1, ps.k, ps.dim)
    return (diff * diff).sum(axis=-1)


def cluster_cost(fm, ps: PrototypeSet, labels) -> Tensor:
    """Mean over the batch of the nearest-patch squared distance to the own-class prototype."""
    d = _sq_distances(fm, ps)
    y = _check_labels(labels, ps.k)
    own = d[np.arange(len(y)), :, y]  # (B, H*W)
    return own.min(axis=1).mean()


def separation_cost(fm, ps: PrototypeSet, labels) -> Tensor:
    """Negative mean nearest-patch squared distance to any wrong-class prototype."""
    if ps.k < 2:
        raise ContractError("separation cost needs at least two prototypes")
    d = _sq_distances(fm, ps)
    y = _check_labels(labels, ps.k)
    b, hw, k = d.shape
    # own-class column pushed out of reach of the min; stays finite
    own = np.zeros((b, 1, k))
    own[np.arange(b), 0, y] = 1e30
    wrong = (d + own).reshape(b, hw * k)
    return -wrong.min(axis=1).mean()


def softmax_pool(sm, fm, j) -> Tensor:
    """Softmax-over-patches weighted sum of patch vectors for prototype(s) ``j``.

    For a batch, ``j`` is one prototype index per item (typically the ground
    truth label).  Returns (B, C), or (C,) for a single unbatched map.
    """
    sm, fm = ng.as_tensor(sm), ng.as_tensor(fm)
    single = fm.ndim == 3
    x = _patches(fm)
    b, hw, _ = x.shape
    s = sm.reshape(b, hw, sm.shape[-1])
    idx = _check_labels(j, s.shape[-1])
    if idx.size == 1 and b > 1:
        idx = np.repeat(idx, b)
    col = s[np.arange(b), :, idx]  # (B, H*W)
    w = ng.softmax(col, axis=-1)
    z = (w.reshape(b, 1, hw) @ x).reshape(b, x.shape[2])
    return z[0] if single else z


def average_pool(fm) -> Tensor:
    """Spatial mean of a (B, H, W, C) map -> (B, C)."""
    return _patches(fm).mean(axis=1)
