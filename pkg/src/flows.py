"""Invertible building blocks with exact log-determinants.

Layers map row-major batches ``(M, n)`` and return ``(output, logdet)`` where
``logdet`` has shape ``(M,)``. Every layer may receive an optional ``context``
tensor ``(M, context_dim)``; only coupling layers use it.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

DEFAULT_MIN_BIN_WIDTH = 1e-3
DEFAULT_MIN_BIN_HEIGHT = 1e-3
DEFAULT_MIN_DERIVATIVE = 1e-3
SINGULARITY_THRESHOLD = 1e-12

# softplus(_DERIVATIVE_SHIFT) + min_derivative == 1, so a zero raw output is a unit slope
_DERIVATIVE_SHIFT = math.log(math.expm1(1.0 - DEFAULT_MIN_DERIVATIVE))


class FlowSingularityError(RuntimeError):
    """Raised when a layer cannot be inverted or has invalid parameters."""


@dataclass
class SplineParams:
    """Normalized parameters of a rational-quadratic spline on ``[-B, B]``.

    Shapes are ``(..., K)`` for widths/heights and ``(..., K + 1)`` for the knot
    derivatives; the leading dimensions broadcast against the spline inputs.
    """

    widths: torch.Tensor
    heights: torch.Tensor
    derivatives: torch.Tensor
    range_bound: float

    @property
    def num_bins(self) -> int:
        return self.widths.shape[-1]

    @classmethod
    def from_unnormalized(
        cls,
        unnormalized_widths: torch.Tensor,
        unnormalized_heights: torch.Tensor,
        unnormalized_derivatives: torch.Tensor,
        range_bound: float,
        min_bin_width: float = DEFAULT_MIN_BIN_WIDTH,
        min_bin_height: float = DEFAULT_MIN_BIN_HEIGHT,
        min_derivative: float = DEFAULT_MIN_DERIVATIVE,
    ) -> "SplineParams":
        """Normalize raw conditioner outputs.

        Widths and heights go through a floored softmax and are scaled to ``2B``.
        The ``K - 1`` interior derivatives go through a floored softplus; the two
        boundary derivatives are fixed to 1 so the linear tails join smoothly.
        All-zero raw outputs give the identity spline.
        """
        for name, tensor in (
            ("widths", unnormalized_widths),
            ("heights", unnormalized_heights),
            ("derivatives", unnormalized_derivatives),
        ):
            if not torch.isfinite(tensor).all():
                raise FlowSingularityError(f"Non-finite spline {name} from conditioner")

        num_bins = unnormalized_widths.shape[-1]
        if min_bin_width * num_bins > 1.0 or min_bin_height * num_bins > 1.0:
            raise ValueError(f"Minimal bin size too large for {num_bins} bins")
        if unnormalized_derivatives.shape[-1] != num_bins - 1:
            raise ValueError(
                f"Expected {num_bins - 1} interior derivatives, "
                f"got {unnormalized_derivatives.shape[-1]}"
            )

        span = 2.0 * range_bound
        widths = F.softmax(unnormalized_widths, dim=-1)
        widths = span * (min_bin_width + (1 - min_bin_width * num_bins) * widths)
        heights = F.softmax(unnormalized_heights, dim=-1)
        heights = span * (min_bin_height + (1 - min_bin_height * num_bins) * heights)

        interior = min_derivative + F.softplus(unnormalized_derivatives + _DERIVATIVE_SHIFT)
        boundary = torch.ones_like(interior[..., :1])
        derivatives = torch.cat([boundary, interior, boundary], dim=-1)

        return cls(widths=widths, heights=heights, derivatives=derivatives, range_bound=range_bound)

    def validate(self) -> None:
        """Check the positivity invariants."""
        for name, tensor in (
            ("widths", self.widths),
            ("heights", self.heights),
            ("derivatives", self.derivatives),
        ):
            if not torch.isfinite(tensor).all():
                raise FlowSingularityError(f"Non-finite spline {name}")
            if (tensor <= 0).any():
                raise FlowSingularityError(f"Spline {name} must be strictly positive")
        if self.derivatives.shape[-1] != self.num_bins + 1:
            raise ValueError(
                f"Expected {self.num_bins + 1} knot derivatives, got {self.derivatives.shape[-1]}"
            )


def _knots(sizes: torch.Tensor, bound: float) -> torch.Tensor:
    """Cumulative knot positions starting at ``-bound``, pinned to ``+bound`` at the end."""
    cum = F.pad(torch.cumsum(sizes, dim=-1), pad=(1, 0), mode="constant", value=0.0) - bound
    first = torch.full_like(cum[..., :1], -bound)
    last = torch.full_like(cum[..., :1], bound)
    return torch.cat([first, cum[..., 1:-1], last], dim=-1)


def rq_spline_apply(
    inputs: torch.Tensor, params: SplineParams, inverse: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Evaluate a monotone rational-quadratic spline elementwise.

    Inside ``[-B, B]`` the map is piecewise rational-quadratic between knots;
    outside it is the identity with zero log-derivative.

    Args:
        inputs: Values to transform, shape ``(...)``
        params: Spline parameters broadcastable to ``(..., K)``
        inverse: Evaluate the inverse map instead

    Returns:
        Tuple of (outputs, log |d outputs / d inputs|), both shaped like ``inputs``
    """
    params.validate()
    bound = params.range_bound

    inside = (inputs >= -bound) & (inputs <= bound)
    x = inputs.clamp(-bound, bound)

    widths = params.widths.expand(*inputs.shape, params.num_bins)
    heights = params.heights.expand(*inputs.shape, params.num_bins)
    derivatives = params.derivatives.expand(*inputs.shape, params.num_bins + 1)

    cumwidths = _knots(widths, bound)
    cumheights = _knots(heights, bound)
    widths = cumwidths[..., 1:] - cumwidths[..., :-1]
    heights = cumheights[..., 1:] - cumheights[..., :-1]

    knots = cumheights if inverse else cumwidths
    bin_idx = torch.searchsorted(knots[..., 1:-1].contiguous(), x[..., None], right=True)
    bin_idx = bin_idx.clamp(0, params.num_bins - 1)

    def pick(t: torch.Tensor) -> torch.Tensor:
        return t.gather(-1, bin_idx)[..., 0]

    in_cumwidths = pick(cumwidths)
    in_widths = pick(widths)
    in_cumheights = pick(cumheights)
    in_heights = pick(heights)
    in_delta = in_heights / in_widths
    in_d0 = pick(derivatives[..., :-1])
    in_d1 = pick(derivatives[..., 1:])
    slope_sum = in_d0 + in_d1 - 2 * in_delta

    if inverse:
        shifted = x - in_cumheights
        a = shifted * slope_sum + in_heights * (in_delta - in_d0)
        b = in_heights * in_d0 - shifted * slope_sum
        c = -in_delta * shifted
        discriminant = (b.pow(2) - 4 * a * c).clamp_min(0.0)
        theta = (2 * c) / (-b - torch.sqrt(discriminant))
        outputs = theta * in_widths + in_cumwidths
    else:
        theta = (x - in_cumwidths) / in_widths
        numerator = in_heights * (in_delta * theta.pow(2) + in_d0 * theta * (1 - theta))
        denominator = in_delta + slope_sum * theta * (1 - theta)
        outputs = in_cumheights + numerator / denominator

    theta_one_minus_theta = theta * (1 - theta)
    denominator = in_delta + slope_sum * theta_one_minus_theta
    derivative_numerator = in_delta.pow(2) * (
        in_d1 * theta.pow(2) + 2 * in_delta * theta_one_minus_theta + in_d0 * (1 - theta).pow(2)
    )
    logabsdet = torch.log(derivative_numerator) - 2 * torch.log(denominator)
    if inverse:
        logabsdet = -logabsdet

    outputs = torch.where(inside, outputs, inputs)
    logabsdet = torch.where(inside, logabsdet, torch.zeros_like(logabsdet))
    return outputs, logabsdet


@dataclass
class ConditionerSpec:
    """Shape of the network that produces spline parameters."""

    hidden_layers: int = 2
    hidden_units: int = 64
    activation: str = "relu"
    residual_blocks: int = 0
    context_dim: int = 0


_ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "elu": nn.ELU,
    "leaky_relu": nn.LeakyReLU,
}


class _ResidualBlock(nn.Module):
    def __init__(self, units: int, layers: int, activation: type[nn.Module]):
        super().__init__()
        modules: list[nn.Module] = []
        for _ in range(layers):
            modules += [activation(), nn.Linear(units, units)]
        self.net = nn.Sequential(*modules)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.net(h)


class Conditioner(nn.Module):
    """MLP (or residual network) from ``identity coords ⊕ context`` to raw spline params.

    The output layer starts at zero, so a fresh coupling layer is the identity.
    """

    def __init__(self, in_features: int, out_features: int, spec: ConditionerSpec):
        super().__init__()
        if spec.activation not in _ACTIVATIONS:
            raise ValueError(f"Unknown activation: {spec.activation}")
        activation = _ACTIVATIONS[spec.activation]
        self.in_features = max(in_features, 1)

        layers: list[nn.Module] = [nn.Linear(self.in_features, spec.hidden_units)]
        if spec.residual_blocks > 0:
            for _ in range(spec.residual_blocks):
                layers.append(_ResidualBlock(spec.hidden_units, spec.hidden_layers, activation))
            layers.append(activation())
        else:
            layers.append(activation())
            for _ in range(spec.hidden_layers - 1):
                layers += [nn.Linear(spec.hidden_units, spec.hidden_units), activation()]

        self.output = nn.Linear(spec.hidden_units, out_features)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)
        self.body = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] == 0:
            features = features.new_zeros(features.shape[0], 1)
        return self.output(self.body(features))


class CouplingLayer(nn.Module):
    """Rational-quadratic spline coupling layer.

    Coordinates with ``mask == True`` pass through unchanged and, together with
    the context, parameterize the splines applied to the remaining coordinates.
    """

    def __init__(
        self,
        mask: torch.Tensor,
        num_bins: int,
        range_bound: float,
        conditioner: ConditionerSpec,
    ):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.ndim != 1:
            raise ValueError(f"Mask must be 1-D, got shape {tuple(mask.shape)}")
        if mask.all():
            raise ValueError("Mask leaves no coordinate to transform")

        self.dim = mask.numel()
        self.num_bins = num_bins
        self.range_bound = float(range_bound)
        self.context_dim = conditioner.context_dim
        self.register_buffer("mask", mask)
        self.register_buffer("identity_idx", torch.nonzero(mask).flatten())
        self.register_buffer("transform_idx", torch.nonzero(~mask).flatten())

        n_transformed = self.transform_idx.numel()
        self.conditioner = Conditioner(
            in_features=self.identity_idx.numel() + self.context_dim,
            out_features=n_transformed * (3 * num_bins - 1),
            spec=conditioner,
        )

    def _spline_params(self, x: torch.Tensor, context: torch.Tensor | None) -> SplineParams:
        features = x.index_select(1, self.identity_idx)
        if self.context_dim > 0:
            if context is None:
                raise ValueError("This coupling layer requires a context")
            if context.shape != (x.shape[0], self.context_dim):
                raise ValueError(
                    f"Context shape {tuple(context.shape)} does not match "
                    f"({x.shape[0]}, {self.context_dim})"
                )
            features = torch.cat([features, context], dim=1)

        raw = self.conditioner(features).view(x.shape[0], self.transform_idx.numel(), -1)
        k = self.num_bins
        return SplineParams.from_unnormalized(
            raw[..., :k], raw[..., k : 2 * k], raw[..., 2 * k :], self.range_bound
        )

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"Expected input of shape (M, {self.dim}), got {tuple(x.shape)}")

    def _transform(self, x: torch.Tensor, context: torch.Tensor | None, inverse: bool):
        self._check(x)
        # Identity coordinates are unchanged, so the same params serve both directions
        params = self._spline_params(x, context)
        transformed, logabsdet = rq_spline_apply(
            x.index_select(1, self.transform_idx), params, inverse=inverse
        )
        y = x.index_copy(1, self.transform_idx, transformed)
        return y, logabsdet.sum(dim=1)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None):
        return self._transform(x, context, inverse=False)

    def inverse(self, y: torch.Tensor, context: torch.Tensor | None = None):
        return self._transform(y, context, inverse=True)


class Permutation(nn.Module):
    """Fixed coordinate permutation (volume preserving)."""

    def __init__(self, permutation: torch.Tensor):
        super().__init__()
        permutation = torch.as_tensor(permutation, dtype=torch.long)
        if sorted(permutation.tolist()) != list(range(permutation.numel())):
            raise ValueError(f"Not a permutation: {permutation.tolist()}")
        self.dim = permutation.numel()
        self.register_buffer("permutation", permutation)
        self.register_buffer("inverse_permutation", torch.argsort(permutation))

    @classmethod
    def random(cls, dim: int, generator: torch.Generator) -> "Permutation":
        return cls(torch.randperm(dim, generator=generator))

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None):
        return x[:, self.permutation], x.new_zeros(x.shape[0])

    def inverse(self, y: torch.Tensor, context: torch.Tensor | None = None):
        return y[:, self.inverse_permutation], y.new_zeros(y.shape[0])


class LULinear(nn.Module):
    """Invertible linear map ``y = P L U x`` with unit-lower ``L`` and upper ``U``.

    Initialized to the identity. ``logdet = Σ log |U_ii|``.
    """

    def __init__(self, dim: int, permutation: torch.Tensor | None = None):
        super().__init__()
        self.dim = dim
        if permutation is None:
            permutation = torch.arange(dim)
        self.register_buffer("permutation", torch.as_tensor(permutation, dtype=torch.long))
        self.lower_entries = nn.Parameter(torch.zeros(dim, dim))
        self.upper_entries = nn.Parameter(torch.zeros(dim, dim))
        self.diagonal = nn.Parameter(torch.ones(dim))

    def factors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return the materialized ``(P, L, U)``."""
        eye = torch.eye(self.dim, dtype=self.diagonal.dtype, device=self.diagonal.device)
        p = eye[self.permutation]
        lower = torch.tril(self.lower_entries, diagonal=-1) + eye
        upper = torch.triu(self.upper_entries, diagonal=1) + torch.diag(self.diagonal)
        return p, lower, upper

    def weight(self) -> torch.Tensor:
        p, lower, upper = self.factors()
        return p @ lower @ upper

    def logabsdet(self) -> torch.Tensor:
        small = self.diagonal.abs() < SINGULARITY_THRESHOLD
        if small.any():
            raise FlowSingularityError(
                f"LU diagonal entries below {SINGULARITY_THRESHOLD}: "
                f"{self.diagonal[small].tolist()}"
            )
        return torch.log(self.diagonal.abs()).sum()

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None):
        logdet = self.logabsdet()
        y = x @ self.weight().T
        return y, logdet.expand(x.shape[0])

    def inverse(self, y: torch.Tensor, context: torch.Tensor | None = None):
        logdet = self.logabsdet()
        p, lower, upper = self.factors()
        # x = U^-1 L^-1 P^T y, column convention
        rhs = p.T @ y.T
        z = torch.linalg.solve_triangular(lower, rhs, upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(upper, z, upper=True)
        return x.T, (-logdet).expand(y.shape[0])


class FlowTransform(nn.Module):
    """Composition of invertible layers on ``R^n``."""

    def __init__(self, dim: int, layers: list[nn.Module] | None = None):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(layers or [])

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"Expected input of shape (M, {self.dim}), got {tuple(x.shape)}")
        logdet = x.new_zeros(x.shape[0])
        for layer in self.layers:
            x, ld = layer(x, context)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y: torch.Tensor, context: torch.Tensor | None = None):
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ValueError(f"Expected input of shape (M, {self.dim}), got {tuple(y.shape)}")
        logdet = y.new_zeros(y.shape[0])
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y, context)
            logdet = logdet + ld
        return y, logdet


def alternating_mask(dim: int, layer_index: int) -> torch.Tensor:
    """Binary mask whose identity set alternates with the layer index."""
    if dim == 1:
        return torch.tensor([False])
    return (torch.arange(dim) + layer_index) % 2 == 0


def build_flow(
    dim: int,
    num_layers: int,
    num_bins: int,
    range_bound: float,
    conditioner: ConditionerSpec,
    linear_transform: str = "none",
    seed: int = 0,
) -> FlowTransform:
    """Stack coupling layers with alternating masks, optionally interleaved with linear maps.

    Args:
        dim: Dimension of the flow
        num_layers: Number of coupling layers
        num_bins: Spline bins per coupling layer
        range_bound: Spline range ``B`` (the spline acts on ``[-B, B]``)
        conditioner: Conditioner network shape, including the context size
        linear_transform: "none", "permutation" or "lu"
        seed: Seed for random permutations

    Returns:
        FlowTransform starting at the identity map
    """
    if linear_transform not in ("none", "permutation", "lu"):
        raise ValueError(f"Unknown linear_transform: {linear_transform}")

    generator = torch.Generator().manual_seed(seed)
    layers: list[nn.Module] = []
    for i in range(num_layers):
        if i > 0 and linear_transform == "permutation":
            layers.append(Permutation.random(dim, generator))
        elif i > 0 and linear_transform == "lu":
            layers.append(LULinear(dim))
        layers.append(CouplingLayer(alternating_mask(dim, i), num_bins, range_bound, conditioner))

    logger.debug(
        f"Built flow: dim={dim}, couplings={num_layers}, bins={num_bins}, "
        f"range=[-{range_bound}, {range_bound}], linear={linear_transform}, "
        f"context={conditioner.context_dim}"
    )
    return FlowTransform(dim, layers)
