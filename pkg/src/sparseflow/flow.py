"""Gradient-flow instrumentation and Hessian spectrum estimation.

Gradient flow is the squared Euclidean norm of the (masked) gradient — the
first-order predicted loss decrease per unit learning rate. The Hessian over
active coordinates is assembled column-by-column from exact Hessian-vector
products over a dataset, eigendecomposed with numpy.linalg.eigh, and smoothed
into a spectral density with a Gaussian kernel.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import hvp, loss_and_grads
from .network import active_indices


@dataclass
class GradFlowRecord:
    step: int
    grad_flow: float
    tag: str = "periodic"  # or 'pre-mask-update' | 'post-mask-update'
    batch_id: int = -1
    per_active: float = 0.0  # grad_flow / number of active parameters


def gradient_flow(net, batch, labels, head=None):
    """grad(L)^T grad(L) of the masked gradient on one batch."""
    _, g = loss_and_grads(net, batch, labels, head)
    return float(g @ g)


def mask_update_delta(net, batch, labels, update_fn, head=None):
    """Gradient flow before and after a mask update, on the same batch.

    `update_fn(net)` performs the update in place (typically a dst_update
    closure). Returns (flow_before, flow_after, delta).
    """
    before = gradient_flow(net, batch, labels, head)
    update_fn(net)
    after = gradient_flow(net, batch, labels, head)
    return before, after, after - before


def dataset_hvp(net, xs, ys, v, head=None, chunk=512):
    """Hessian-vector product of the mean loss over a whole dataset."""
    n = xs.shape[0]
    acc = None
    for start in range(0, n, chunk):
        xb, yb = xs[start:start + chunk], None if ys is None else ys[start:start + chunk]
        hv = hvp(net, xb, yb, v, head) * (xb.shape[0] / n)
        acc = hv if acc is None else acc + hv
    return acc


def full_hessian(net, xs, ys, head=None, cap=5000, chunk=512):
    """Dense Hessian over active coordinates, one hvp per basis vector.

    Refuses to build matrices larger than `cap` x `cap`.
    """
    n_active = active_indices(net).size
    if n_active > cap:
        raise ValueError(f"{n_active} active coordinates exceed the cap of {cap}")
    h = np.empty((n_active, n_active))
    e = np.zeros(n_active)
    for j in range(n_active):
        e[j] = 1.0
        h[:, j] = dataset_hvp(net, xs, ys, e, head, chunk)
        e[j] = 0.0
    return h


@dataclass
class SpectrumEstimate:
    eigenvalues: np.ndarray  # ascending
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def spectrum(h, bandwidth=None, grid_points=512, symmetry_tol=1e-6):
    """All eigenvalues plus a Gaussian-kernel spectral density.

    density(x) = 1/(N sigma sqrt(2 pi)) * sum_i exp(-(x - lam_i)^2 / 2 sigma^2)
    on a uniform grid spanning [lam_min - 3 sigma, lam_max + 3 sigma].
    Bandwidth defaults to 1% of the spectral range.
    """
    h = np.asarray(h)
    defect = np.abs(h - h.T).max()
    if defect > symmetry_tol:
        raise ValueError(f"matrix is not symmetric (max defect {defect:.3e})")
    eigs = np.linalg.eigh(h)[0]
    lo, hi = float(eigs[0]), float(eigs[-1])
    if bandwidth is None:
        spread = hi - lo
        bandwidth = 0.01 * spread if spread > 0 else max(1e-12, abs(hi) * 0.01, 1e-6)
    grid = np.linspace(lo - 3 * bandwidth, hi + 3 * bandwidth, grid_points)
    z = (grid[:, None] - eigs[None, :]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=1) / (eigs.size * bandwidth * np.sqrt(2 * np.pi))
    return SpectrumEstimate(eigenvalues=eigs, grid=grid, density=density, bandwidth=bandwidth)


def largest_negative_eigenvalue(eigenvalues):
    """Magnitude of the most negative eigenvalue, 0 if none are negative."""
    lo = float(np.min(eigenvalues))
    return -lo if lo < 0 else 0.0


def largest_negative_eigenvalue_track(spectra):
    """[(step, |most negative eigenvalue|), ...] from (step, SpectrumEstimate) pairs."""
    return [(step, largest_negative_eigenvalue(est.eigenvalues)) for step, est in spectra]
