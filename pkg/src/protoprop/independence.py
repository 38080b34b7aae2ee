"""HSIC with a Gaussian kernel on embeddings and a linear kernel on one-hot labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .errors import ContractError
from .numgrad import Tensor

SIGMA_FLOOR = 1e-8
GAUSSIAN = "gaussian"
LINEAR = "linear"


@dataclass(frozen=True)
class HsicConfig:
    lambda_h: float = 10.0
    normalized: bool = True
    min_batch: int = 8  # smaller batches skip the term

    def __post_init__(self):
        if self.lambda_h < 0:
            raise ContractError("lambda_h must be nonnegative")


def _rows(u) -> np.ndarray:
    a = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    return a.reshape(len(a), -1)


def median_heuristic(u) -> float:
    """Median pairwise Euclidean distance over unordered pairs, floored at 1e-8."""
    x = _rows(u)
    m = len(x)
    if m < 2:
        raise ContractError("median heuristic needs at least two points")
    iu = np.triu_indices(m, k=1)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))[iu]
    return max(float(np.median(d)), SIGMA_FLOOR)


def _sq_dists(u: Tensor) -> Tensor:
    m = u.shape[0]
    x = u.reshape(m, -1)
    diff = x.reshape(m, 1, -1) - x.reshape(1, m, -1)
    return (diff * diff).sum(axis=-1)


def gaussian_kernel(u, sigma: float) -> Tensor:
    """k_ij = exp(-||u_i - u_j||^2 / sigma^2)."""
    if sigma <= 0:
        raise ContractError("kernel bandwidth must be positive")
    return ng.exp(_sq_dists(ng.as_tensor(u)) * (-1.0 / sigma**2))


def linear_kernel(v) -> Tensor:
    v = ng.as_tensor(v)
    m = v.shape[0]
    x = v.reshape(m, -1)
    # elementwise then reduce, so every entry is summed in the same order
    return (x.reshape(m, 1, -1) * x.reshape(1, m, -1)).sum(axis=-1)


def kernel_matrix(u, kind: str, sigma: float | None = None) -> Tensor:
    """Kernel on the rows of ``u``; a Gaussian bandwidth defaults to the median heuristic."""
    if kind == GAUSSIAN:
        return gaussian_kernel(u, median_heuristic(u) if sigma is None else sigma)
    if kind == LINEAR:
        return linear_kernel(u)
    raise ContractError(f"unknown kernel {kind!r}")


def center(k) -> Tensor:
    """H K H with H = I - 11^T/m, via row, column and grand means."""
    k = ng.as_tensor(k)
    m = k.shape[0]
    rows = ng.exact_sum(k, axis=1) * (1.0 / m)
    cols = ng.exact_sum(k, axis=0) * (1.0 / m)
    grand = ng.exact_sum(k) * (1.0 / m**2)
    return k - rows.reshape(m, 1) - cols.reshape(1, m) + grand


def hsic_from_kernels(k, l) -> Tensor:
    """(1/m^2) trace(K H L H).

    Reductions use correctly rounded sums, so permuting the samples of both
    kernels leaves the result bit-for-bit unchanged.
    """
    k, l = ng.as_tensor(k), ng.as_tensor(l)
    m = k.shape[0]
    if l.shape[0] != m:
        raise ContractError(f"kernel sizes differ: {k.shape} vs {l.shape}")
    if np.ptp(k.data) == 0 or np.ptp(l.data) == 0:
        # centering annihilates a constant kernel; skip the round-off
        return Tensor(0.0)
    # trace(HKH L) = sum((HKH) * L^T)
    return ng.exact_sum(center(k) * l.T) * (1.0 / m**2)


def hsic_biased(
    u, v, config: HsicConfig | None = None, u_kernel: str = GAUSSIAN, v_kernel: str = LINEAR, sigma: float | None = None
) -> Tensor:
    """Biased empirical HSIC between the rows of ``u`` and ``v``.

    By default ``u`` (embeddings) gets a Gaussian kernel with median
    bandwidth and ``v`` (one-hot labels) a linear kernel.  ``sigma``
    overrides the bandwidth of ``u``'s kernel.
    """
    u, v = ng.as_tensor(u), ng.as_tensor(v)
    if u.shape[0] != v.shape[0]:
        raise ContractError(f"sample counts differ: {u.shape[0]} vs {v.shape[0]}")
    if u.shape[0] < 2:
        raise ContractError("HSIC needs at least two samples")
    return hsic_from_kernels(kernel_matrix(u, u_kernel, sigma), kernel_matrix(v, v_kernel))


@dataclass
class NormalizedHsic:
    value: Tensor
    degenerate: bool = False

    def item(self) -> float:
        return self.value.item()


def hsic_normalized(
    u,
    v,
    config: HsicConfig | None = None,
    u_kernel: str = GAUSSIAN,
    v_kernel: str = LINEAR,
    sigma: float | None = None,
    eps: float = 1e-12,
) -> NormalizedHsic:
    """HSIC(U, V) / sqrt(HSIC(U, U) HSIC(V, V)), in [0, 1].

    A constant input has zero self-HSIC; the result is then 0 with
    ``degenerate`` set.
    """
    u, v = ng.as_tensor(u), ng.as_tensor(v)
    if u.shape[0] != v.shape[0]:
        raise ContractError(f"sample counts differ: {u.shape[0]} vs {v.shape[0]}")
    if u.shape[0] < 2:
        raise ContractError("HSIC needs at least two samples")
    k = kernel_matrix(u, u_kernel, sigma)
    l = kernel_matrix(v, v_kernel)
    kk = hsic_from_kernels(k, k)
    ll = hsic_from_kernels(l, l)
    if kk.item() <= eps or ll.item() <= eps:
        return NormalizedHsic(Tensor(0.0), degenerate=True)
    return NormalizedHsic(hsic_from_kernels(k, l) / ng.sqrt(kk * ll))


def one_hot(labels, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def independence_loss(
    z_a, z_o, attr_onehot, obj_onehot, config: HsicConfig = HsicConfig(), sigmas: tuple | None = None
) -> Tensor:
    """lambda_h * (HSIC(z_a, O) + HSIC(z_o, A)) / 2.

    Bandwidths come from the batch (median heuristic) and are constants for
    the gradient; ``sigmas = (sigma_a, sigma_o)`` pins them instead.
    """
    z_a, z_o = ng.as_tensor(z_a), ng.as_tensor(z_o)
    m = z_a.shape[0]
    if not (z_o.shape[0] == m == len(attr_onehot) == len(obj_onehot)):
        raise ContractError("independence loss inputs must share the batch size")
    if m < 2:
        raise ContractError("HSIC needs at least two samples")
    if config.lambda_h == 0:
        return Tensor(0.0)
    sa, so = sigmas if sigmas is not None else (median_heuristic(z_a), median_heuristic(z_o))
    if config.normalized:
        a = hsic_normalized(z_a, obj_onehot, sigma=sa).value
        o = hsic_normalized(z_o, attr_onehot, sigma=so).value
    else:
        a = hsic_biased(z_a, obj_onehot, sigma=sa)
        o = hsic_biased(z_o, attr_onehot, sigma=so)
    return (a + o) * (config.lambda_h / 2.0)
