"""Multi-chart manifold model.

A single ambient flow on ``R^D``, conditioned on a learned per-chart index
embedding, realizes every chart map. ``chart_flow.forward`` is the chart
``φ_k`` (manifold → padded latent), ``chart_flow.inverse`` is ``φ_k^{-1}``.
Latent points are assigned to the chart with the nearest center; ambient
points are encoded through the nearest-center chart among those that reach them
with the smallest padded residual.
"""

import math
from typing import NamedTuple

import torch
from loguru import logger
from torch import nn

from src.config import ModelConfig
from src.flows import ConditionerSpec, FlowTransform, build_flow

DTYPE = torch.float64

# Residuals within this of the smallest one count as on-chart
ENCODE_RESIDUAL_TOL = 1e-8


def pad(u: torch.Tensor, ambient_dim: int) -> torch.Tensor:
    """Append ``ambient_dim - d`` zeros to every latent row."""
    latent_dim = u.shape[-1]
    if ambient_dim < latent_dim:
        raise ValueError(f"Cannot pad {latent_dim}-vectors to dimension {ambient_dim}")
    return torch.cat([u, u.new_zeros(*u.shape[:-1], ambient_dim - latent_dim)], dim=-1)


class Encoding(NamedTuple):
    """Result of mapping ambient points through their selected chart."""

    u: torch.Tensor  # (M, d) latent coordinates
    chart: torch.Tensor  # (M,) selected chart index
    residual: torch.Tensor  # (M,) norm of the D - d padded coordinates
    logdet: torch.Tensor  # (M,) log |det J_φ(x)| of the selected chart


class Atlas(nn.Module):
    """Chart centers, index embeddings and the index-conditioned chart flow."""

    def __init__(
        self,
        ambient_dim: int,
        latent_dim: int,
        num_charts: int,
        index_dim: int,
        chart_flow: FlowTransform,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if not 1 <= latent_dim < ambient_dim:
            raise ValueError(
                f"Need 1 <= latent_dim < ambient_dim, got latent_dim={latent_dim}, "
                f"ambient_dim={ambient_dim}"
            )
        if num_charts < 1:
            raise ValueError(f"num_charts must be >= 1: {num_charts}")
        if chart_flow.dim != ambient_dim:
            raise ValueError(f"Chart flow acts on R^{chart_flow.dim}, expected R^{ambient_dim}")

        self.ambient_dim = ambient_dim
        self.latent_dim = latent_dim
        self.num_charts = num_charts
        self.index_dim = index_dim
        self.chart_flow = chart_flow

        if generator is None:
            generator = torch.Generator().manual_seed(0)
        # Centers are sampled once and never trained
        centers = torch.randn(num_charts, latent_dim, generator=generator, dtype=DTYPE)
        self.register_buffer("centers", centers)
        self.index_embeddings = nn.Parameter(
            0.1 * torch.randn(num_charts, index_dim, generator=generator, dtype=DTYPE)
        )

    def context(self, chart: torch.Tensor) -> torch.Tensor:
        """Index embeddings ``a_k`` for a batch of chart indices."""
        return self.index_embeddings.index_select(0, chart)

    def assign_chart(self, u: torch.Tensor) -> torch.Tensor:
        """Nearest-center chart for each latent row; ties go to the smallest index."""
        distances = ((u[:, None, :] - self.centers[None, :, :]) ** 2).sum(dim=-1)
        # torch.argmin returns the first minimal index
        return torch.argmin(distances, dim=1)

    def chart_inverse(self, u: torch.Tensor, chart: torch.Tensor):
        """Embed latent points through ``φ_k^{-1}``: returns ``(x, log |det J_{φ^{-1}}|)``."""
        return self.chart_flow.inverse(pad(u, self.ambient_dim), context=self.context(chart))

    def chart_forward(self, x: torch.Tensor, chart: torch.Tensor):
        """Map ambient points through ``φ_k``: returns ``(z, log |det J_φ|)`` in padded space."""
        return self.chart_flow.forward(x, context=self.context(chart))

    def decode(self, u: torch.Tensor) -> torch.Tensor:
        """Map latent points to the manifold with the nearest-center chart."""
        x, _ = self.chart_inverse(u, self.assign_chart(u))
        return x

    def encode(self, x: torch.Tensor, chart: torch.Tensor | int | None = None) -> Encoding:
        """Map ambient points to latent coordinates.

        Every chart is evaluated. Charts whose padded residual is within
        ``ENCODE_RESIDUAL_TOL`` of the smallest residual are eligible, and among those
        the one whose latent image lies closest to its own center is selected, so
        points on the manifold keep their nearest-center chart. If no residual is
        finite, the nearest-center rule applies to all charts. Passing ``chart``
        forces a specific chart instead.
        """
        batch = x.shape[0]
        if chart is not None:
            chart = torch.as_tensor(chart, dtype=torch.long, device=x.device).expand(batch)
            z, logdet = self.chart_forward(x, chart)
            u = z[:, : self.latent_dim]
            residual = torch.linalg.vector_norm(z[:, self.latent_dim :], dim=1)
            return Encoding(u=u, chart=chart, residual=residual, logdet=logdet)

        zs, logdets, scores, residuals = [], [], [], []
        for i in range(self.num_charts):
            idx = torch.full((batch,), i, dtype=torch.long, device=x.device)
            z, logdet = self.chart_forward(x, idx)
            zs.append(z)
            logdets.append(logdet)
            scores.append(((z[:, : self.latent_dim] - self.centers[i]) ** 2).sum(dim=1))
            residuals.append(torch.linalg.vector_norm(z[:, self.latent_dim :], dim=1))

        scores = torch.stack(scores, dim=1)
        residuals = torch.stack(residuals, dim=1)
        smallest = residuals.nan_to_num(nan=math.inf).min(dim=1, keepdim=True).values
        eligible = residuals <= smallest + ENCODE_RESIDUAL_TOL
        # Rows without a finite residual fall back to every chart
        eligible |= ~eligible.any(dim=1, keepdim=True)
        selected = torch.argmin(scores.masked_fill(~eligible, math.inf), dim=1)
        z = torch.stack(zs, dim=1)[torch.arange(batch), selected]
        logdet = torch.stack(logdets, dim=1)[torch.arange(batch), selected]
        residual = torch.linalg.vector_norm(z[:, self.latent_dim :], dim=1)
        if batch > 0:
            logger.debug(
                f"encode: mean residual={residual.mean().item():.3e}, "
                f"chart counts={torch.bincount(selected, minlength=self.num_charts).tolist()}"
            )
        return Encoding(u=z[:, : self.latent_dim], chart=selected, residual=residual, logdet=logdet)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Project ambient points onto the learned manifold, ``φ_k^{-1}(φ_k(x))`` with zeroed padding."""
        encoding = self.encode(x)
        x_hat, _ = self.chart_inverse(encoding.u, encoding.chart)
        return x_hat


class LatentModel(nn.Module):
    """Base flow ``h`` on ``R^d`` with a standard-normal base distribution."""

    def __init__(self, base_flow: FlowTransform):
        super().__init__()
        self.base_flow = base_flow
        self.dim = base_flow.dim

    def log_prob(self, u: torch.Tensor) -> torch.Tensor:
        """``log N(h(u); 0, I) + log |det J_h(u)|``."""
        z, logdet = self.base_flow.forward(u)
        log_normal = -0.5 * (z**2).sum(dim=1) - 0.5 * self.dim * math.log(2 * math.pi)
        return log_normal + logdet

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        """Draw ``u = h^{-1}(ũ)`` with ``ũ ~ N(0, I_d)``."""
        dtype = next(self.parameters(), torch.empty(0, dtype=DTYPE)).dtype
        noise = torch.randn(n, self.dim, generator=generator, dtype=dtype)
        u, _ = self.base_flow.inverse(noise)
        return u


class MultiChartFlow(nn.Module):
    """Atlas plus latent density: the complete generative model."""

    def __init__(self, atlas: Atlas, latent: LatentModel):
        super().__init__()
        if latent.dim != atlas.latent_dim:
            raise ValueError(
                f"Latent model dimension {latent.dim} does not match atlas latent_dim "
                f"{atlas.latent_dim}"
            )
        self.atlas = atlas
        self.latent = latent

    @property
    def ambient_dim(self) -> int:
        return self.atlas.ambient_dim

    @property
    def latent_dim(self) -> int:
        return self.atlas.latent_dim

    def chart_parameters(self) -> list[nn.Parameter]:
        """Parameters trained in the reconstruction phase."""
        return list(self.atlas.parameters())

    def base_parameters(self) -> list[nn.Parameter]:
        """Parameters trained in the maximum-likelihood phase."""
        return list(self.latent.parameters())

    @torch.no_grad()
    def sample(self, n: int, seed: int = 0) -> torch.Tensor:
        """Generate ``n`` ambient points: base noise → ``h^{-1}`` → nearest chart → ``φ_k^{-1}``."""
        generator = torch.Generator().manual_seed(seed)
        if n == 0:
            return torch.empty(0, self.ambient_dim, dtype=DTYPE)
        u = self.latent.sample(n, generator)
        return self.atlas.decode(u)


def build_model(config: ModelConfig) -> MultiChartFlow:
    """Construct an identity-initialized model from an architecture config."""
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    def conditioner(context_dim: int) -> ConditionerSpec:
        return ConditionerSpec(
            hidden_layers=config.hidden_layers,
            hidden_units=config.hidden_units,
            activation=config.activation,
            residual_blocks=config.residual_blocks,
            context_dim=context_dim,
        )

    chart_flow = build_flow(
        dim=config.ambient_dim,
        num_layers=config.chart_layers,
        num_bins=config.chart_bins,
        range_bound=config.spline_range,
        conditioner=conditioner(config.index_dim),
        linear_transform=config.linear_transform,
        seed=config.seed,
    )
    base_flow = build_flow(
        dim=config.latent_dim,
        num_layers=config.base_layers,
        num_bins=config.base_bins,
        range_bound=config.spline_range,
        conditioner=conditioner(0),
        linear_transform=config.linear_transform,
        seed=config.seed + 1,
    )
    atlas = Atlas(
        ambient_dim=config.ambient_dim,
        latent_dim=config.latent_dim,
        num_charts=config.num_charts,
        index_dim=config.index_dim,
        chart_flow=chart_flow,
        generator=generator,
    )
    model = MultiChartFlow(atlas, LatentModel(base_flow)).to(DTYPE)

    n_chart = sum(p.numel() for p in model.chart_parameters())
    n_base = sum(p.numel() for p in model.base_parameters())
    logger.info(
        f"Model built: D={config.ambient_dim}, d={config.latent_dim}, charts={config.num_charts}, "
        f"index_dim={config.index_dim}, chart params={n_chart}, base params={n_base}"
    )
    return model
