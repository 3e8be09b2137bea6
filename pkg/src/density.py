"""Log-likelihood of points on the learned manifold.

For ``x`` with latent code ``u`` in chart ``k``::

    log p(x) = log p(u) - ½ log det(Jᵀ J),    J = ∂ φ_k^{-1}(pad(u)) / ∂u

``bound`` replaces ``½ log det`` with ``½ log Tr(JᵀJ)``, ``hutchinson`` estimates
that trace stochastically and ``coarse`` uses the square ambient flow's logdet.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum

import torch
from loguru import logger

from src.atlas import Atlas, LatentModel, MultiChartFlow

DEGENERACY_THRESHOLD = 1e-10


class DegenerateJacobianError(ValueError):
    """Raised when a chart Jacobian is (numerically) rank deficient."""


class LogLikelihoodMode(Enum):
    """Volume correction used by ``log_prob_manifold``."""

    EXACT = "exact"
    BOUND = "bound"
    HUTCHINSON = "hutchinson"
    COARSE = "coarse"

    @classmethod
    def from_name(cls, name: "str | LogLikelihoodMode") -> "LogLikelihoodMode":
        if isinstance(name, cls):
            return name
        for mode in cls:
            if mode.value == name:
                return mode
        valid = [m.value for m in cls]
        raise ValueError(f"Unknown log-likelihood mode: {name}. Must be one of {valid}")


@dataclass
class ChartJacobian:
    """Batch of ``(D, d)`` Jacobians of ``u ↦ φ_k^{-1}(pad(u))``."""

    matrix: torch.Tensor  # (M, D, d)
    chart: torch.Tensor  # (M,)

    @property
    def singular_values(self) -> torch.Tensor:
        return torch.linalg.svdvals(self.matrix)

    @property
    def is_degenerate(self) -> torch.Tensor:
        return self.singular_values.min(dim=-1).values < DEGENERACY_THRESHOLD


@dataclass
class TraceEstimate:
    """Hutchinson estimate of ``Tr(JᵀJ)`` with its standard error over probes."""

    mean: torch.Tensor
    stderr: torch.Tensor


def _as_chart(chart: torch.Tensor | int, batch: int) -> torch.Tensor:
    return torch.as_tensor(chart, dtype=torch.long).expand(batch)


def chart_jacobian(atlas: Atlas, u: torch.Tensor, chart: torch.Tensor | int) -> ChartJacobian:
    """Exact Jacobian of the embedding through a fixed chart, by reverse-mode autodiff.

    One backward pass per ambient coordinate; rows of different samples do not
    interact, so summing over the batch gives every sample's row at once.
    """
    chart = _as_chart(chart, u.shape[0])
    with torch.enable_grad():
        u = u.detach().requires_grad_(True)
        x, _ = atlas.chart_inverse(u, chart)
        rows = []
        for j in range(x.shape[1]):
            (grad,) = torch.autograd.grad(x[:, j].sum(), u, retain_graph=j < x.shape[1] - 1)
            rows.append(grad)
    return ChartJacobian(matrix=torch.stack(rows, dim=1), chart=chart)


def embedding_jvp(
    atlas: Atlas, u: torch.Tensor, chart: torch.Tensor | int
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Closure ``v ↦ J v`` for the chart embedding, via the double-backward trick.

    The closure accepts probes of shape ``(M, d)`` or stacked ``(P, M, d)``.
    """
    chart = _as_chart(chart, u.shape[0])
    with torch.enable_grad():
        u = u.detach().requires_grad_(True)
        x, _ = atlas.chart_inverse(u, chart)
        w = torch.zeros_like(x, requires_grad=True)
        (vjp,) = torch.autograd.grad(x, u, grad_outputs=w, create_graph=True)

    def jvp(v: torch.Tensor) -> torch.Tensor:
        if v.ndim == 2:
            (out,) = torch.autograd.grad(vjp, w, grad_outputs=v, retain_graph=True)
            return out
        return torch.stack([jvp(probe) for probe in v])

    return jvp


def log_prob_latent(latent: LatentModel, u: torch.Tensor) -> torch.Tensor:
    """``log N(h(u); 0, I) + log |det J_h(u)|``."""
    return latent.log_prob(u)


def logdet_metric_exact(jacobian: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """``½ log det(JᵀJ) = Σ log s_i`` from the singular values of ``J``.

    Args:
        jacobian: ``(..., D, d)`` matrices
        strict: Raise on degenerate matrices; otherwise return NaN for them

    Raises:
        DegenerateJacobianError: If ``strict`` and some smallest singular value < 1e-10
    """
    singular_values = torch.linalg.svdvals(jacobian)
    smallest = singular_values.min(dim=-1).values
    degenerate = smallest < DEGENERACY_THRESHOLD
    if degenerate.any():
        if strict:
            raise DegenerateJacobianError(
                f"Rank-deficient chart Jacobian: smallest singular value "
                f"{smallest[degenerate].min().item():.3e} < {DEGENERACY_THRESHOLD}"
            )
        singular_values = singular_values.clamp_min(DEGENERACY_THRESHOLD)
    logdet = torch.log(singular_values).sum(dim=-1)
    return torch.where(degenerate, torch.full_like(logdet, math.nan), logdet)


def logdet_metric_cholesky(jacobian: torch.Tensor) -> torch.Tensor:
    """``½ log det(JᵀJ)`` via the Cholesky factor of the Gram matrix."""
    gram = jacobian.transpose(-2, -1) @ jacobian
    factor = torch.linalg.cholesky(gram)
    return torch.log(torch.diagonal(factor, dim1=-2, dim2=-1)).sum(dim=-1)


def logdet_metric_bound(jacobian: torch.Tensor) -> torch.Tensor:
    """``½ log Tr(JᵀJ)`` from the squared Frobenius norm of ``J``."""
    frobenius_sq = (jacobian**2).sum(dim=(-2, -1))
    if (frobenius_sq == 0).any():
        raise ValueError("logdet_metric_bound is undefined for a zero Jacobian")
    return 0.5 * torch.log(frobenius_sq)


def hutchinson_trace(
    jvp: Callable[[torch.Tensor], torch.Tensor],
    probe_shape: tuple[int, ...],
    n_probes: int = 1,
    seed: int = 0,
    chunk_size: int = 10000,
    dtype: torch.dtype = torch.float64,
) -> TraceEstimate:
    """Unbiased estimate of ``Tr(JᵀJ)`` as the probe average of ``‖J v‖²``, ``v ~ N(0, I_d)``.

    Args:
        jvp: Maps stacked probes ``(P, *probe_shape)`` to ``(P, ..., D)``
        probe_shape: Shape of one probe, e.g. ``(d,)`` or ``(M, d)``
        n_probes: Number of probes
        seed: Seed of the probe generator
        chunk_size: Probes evaluated per call of ``jvp``
        dtype: Probe dtype

    Returns:
        TraceEstimate with mean and standard error (zero for a single probe)
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1: {n_probes}")

    generator = torch.Generator().manual_seed(seed)
    values = []
    remaining = n_probes
    while remaining > 0:
        count = min(chunk_size, remaining)
        probes = torch.randn(count, *probe_shape, generator=generator, dtype=dtype)
        values.append((jvp(probes) ** 2).sum(dim=-1))
        remaining -= count

    samples = torch.cat(values, dim=0)
    mean = samples.mean(dim=0)
    if n_probes == 1:
        stderr = torch.zeros_like(mean)
    else:
        stderr = samples.std(dim=0, correction=1) / math.sqrt(n_probes)
    return TraceEstimate(mean=mean, stderr=stderr)


def log_prob_manifold(
    model: MultiChartFlow,
    x: torch.Tensor,
    mode: str | LogLikelihoodMode = LogLikelihoodMode.EXACT,
    n_probes: int = 1,
    seed: int = 0,
    strict: bool = True,
) -> torch.Tensor:
    """Per-point log-density on the learned manifold.

    ``bound`` and ``hutchinson`` return the trace-based surrogate; ``coarse`` is an
    approximation kept for ablations.

    Args:
        model: Multi-chart flow
        x: Ambient points ``(M, D)``
        mode: Volume-correction mode
        n_probes: Hutchinson probes per point
        seed: Hutchinson probe seed
        strict: In exact mode, raise on degenerate Jacobians instead of returning NaN

    Returns:
        Tensor ``(M,)`` of log-densities
    """
    mode = LogLikelihoodMode.from_name(mode)
    atlas = model.atlas
    with torch.no_grad():
        encoding = atlas.encode(x)
        log_latent = log_prob_latent(model.latent, encoding.u)

    if mode is LogLikelihoodMode.COARSE:
        with torch.no_grad():
            _, volume = atlas.chart_inverse(encoding.u, encoding.chart)
    elif mode is LogLikelihoodMode.HUTCHINSON:
        jvp = embedding_jvp(atlas, encoding.u, encoding.chart)
        estimate = hutchinson_trace(
            jvp, tuple(encoding.u.shape), n_probes=n_probes, seed=seed, dtype=x.dtype
        )
        volume = 0.5 * torch.log(estimate.mean)
    else:
        jacobian = chart_jacobian(atlas, encoding.u, encoding.chart).matrix
        if mode is LogLikelihoodMode.EXACT:
            volume = logdet_metric_exact(jacobian, strict=strict)
        else:
            volume = logdet_metric_bound(jacobian)

    result = (log_latent - volume).detach()
    logger.debug(
        f"log_prob_manifold[{mode.value}]: {len(x)} points, mean {result.nanmean().item():.4f}"
    )
    return result
