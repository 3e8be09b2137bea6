#!/usr/bin/env python3
"""Tests for flows module - spline couplings, linear layers and their composition."""

import pytest
import torch

from src.flows import (
    ConditionerSpec,
    CouplingLayer,
    FlowSingularityError,
    FlowTransform,
    LULinear,
    Permutation,
    SplineParams,
    alternating_mask,
    build_flow,
    rq_spline_apply,
)

DTYPE = torch.float64


def perturb(module: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> torch.nn.Module:
    """Move every parameter away from its (identity) initialization."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return module


def random_spline(num_bins: int = 8, bound: float = 3.0, seed: int = 0) -> SplineParams:
    generator = torch.Generator().manual_seed(seed)
    return SplineParams.from_unnormalized(
        torch.randn(num_bins, generator=generator, dtype=DTYPE),
        torch.randn(num_bins, generator=generator, dtype=DTYPE),
        torch.randn(num_bins - 1, generator=generator, dtype=DTYPE),
        bound,
    )


def identity_spline(num_bins: int = 8, bound: float = 3.0) -> SplineParams:
    return SplineParams.from_unnormalized(
        torch.zeros(num_bins, dtype=DTYPE),
        torch.zeros(num_bins, dtype=DTYPE),
        torch.zeros(num_bins - 1, dtype=DTYPE),
        bound,
    )


def numerical_jacobian(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference Jacobian of ``fn: R^n -> R^n`` at a single point."""
    n = x.numel()
    columns = []
    for j in range(n):
        step = torch.zeros(n, dtype=DTYPE)
        step[j] = h
        columns.append((fn(x + step) - fn(x - step)) / (2 * h))
    return torch.stack(columns, dim=1)


class TestSplineParams:
    """Tests for spline parameter normalization."""

    def test_widths_and_heights_cover_range(self):
        """Test bin sizes are positive and sum to 2B."""
        params = random_spline(num_bins=6, bound=3.0)

        assert (params.widths > 0).all()
        assert (params.heights > 0).all()
        assert params.widths.sum().item() == pytest.approx(6.0, abs=1e-12)
        assert params.heights.sum().item() == pytest.approx(6.0, abs=1e-12)

    def test_boundary_derivatives_are_one(self):
        """Test the boundary slopes match the identity tails."""
        params = random_spline(num_bins=5)

        assert params.derivatives.shape == (6,)
        assert params.derivatives[0].item() == 1.0
        assert params.derivatives[-1].item() == 1.0
        assert (params.derivatives > 0).all()

    def test_non_finite_rejected(self):
        """Test non-finite raw parameters are rejected."""
        widths = torch.zeros(4, dtype=DTYPE)
        widths[1] = float("nan")

        with pytest.raises(FlowSingularityError, match="Non-finite"):
            SplineParams.from_unnormalized(
                widths, torch.zeros(4, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), 3.0
            )

    def test_derivative_count_checked(self):
        """Test the interior derivative count must be K - 1."""
        with pytest.raises(ValueError, match="interior derivatives"):
            SplineParams.from_unnormalized(
                torch.zeros(4, dtype=DTYPE),
                torch.zeros(4, dtype=DTYPE),
                torch.zeros(5, dtype=DTYPE),
                3.0,
            )


class TestRQSpline:
    """Tests for rational-quadratic spline evaluation."""

    def test_identity_spline(self):
        """Test uniform bins with unit slopes give the identity."""
        x = torch.linspace(-2.9, 2.9, 101, dtype=DTYPE)

        y, logdet = rq_spline_apply(x, identity_spline())

        torch.testing.assert_close(y, x, atol=1e-12, rtol=0)
        torch.testing.assert_close(logdet, torch.zeros_like(x), atol=1e-12, rtol=0)

    def test_linear_tails(self):
        """Test inputs outside [-B, B] pass through with zero log-derivative."""
        x = torch.tensor([4.0, -4.0, 10.0], dtype=DTYPE)

        y, logdet = rq_spline_apply(x, random_spline(bound=3.0))

        torch.testing.assert_close(y, x)
        assert (logdet == 0).all()

    def test_derivative_matches_finite_difference(self):
        """Test exp(logdet) equals the central finite-difference slope at x=0.3."""
        params = random_spline(seed=3)
        h = 1e-6
        x = torch.tensor([0.3], dtype=DTYPE)

        _, logdet = rq_spline_apply(x, params)
        y_plus, _ = rq_spline_apply(x + h, params)
        y_minus, _ = rq_spline_apply(x - h, params)
        slope = (y_plus - y_minus) / (2 * h)

        assert torch.exp(logdet).item() == pytest.approx(slope.item(), rel=1e-5)

    def test_strictly_monotone(self):
        """Test sorted inputs give strictly sorted outputs."""
        x = torch.linspace(-5.0, 5.0, 2001, dtype=DTYPE)

        y, _ = rq_spline_apply(x, random_spline(seed=7))

        assert (torch.diff(y) > 0).all()

    def test_inverse_round_trip(self):
        """Test the inverse undoes the forward map and negates the logdet."""
        params = random_spline(seed=11)
        x = torch.linspace(-4.0, 4.0, 501, dtype=DTYPE)

        y, logdet = rq_spline_apply(x, params)
        x_back, inv_logdet = rq_spline_apply(y, params, inverse=True)

        torch.testing.assert_close(x_back, x, atol=1e-10, rtol=0)
        torch.testing.assert_close(logdet + inv_logdet, torch.zeros_like(x), atol=1e-10, rtol=0)


class TestCouplingLayer:
    """Tests for spline coupling layers."""

    @staticmethod
    def make(dim: int, context_dim: int = 0, seed: int = 0) -> CouplingLayer:
        spec = ConditionerSpec(hidden_layers=2, hidden_units=16, context_dim=context_dim)
        layer = CouplingLayer(alternating_mask(dim, 0), 6, 3.0, spec).to(DTYPE)
        return layer if seed is None else perturb(layer, seed=seed)

    def test_identity_at_initialization(self):
        """Test a fresh layer (zero output weights) is the identity."""
        spec = ConditionerSpec(hidden_layers=2, hidden_units=16)
        layer = CouplingLayer(alternating_mask(3, 1), 6, 3.0, spec).to(DTYPE)
        x = torch.randn(32, 3, dtype=DTYPE)

        y, logdet = layer(x)

        torch.testing.assert_close(y, x, atol=1e-12, rtol=0)
        torch.testing.assert_close(logdet, torch.zeros(32, dtype=DTYPE), atol=1e-12, rtol=0)

    def test_identity_coordinates_pass_through(self):
        """Test masked coordinates are unchanged."""
        layer = self.make(4)
        x = torch.randn(16, 4, dtype=DTYPE)

        y, _ = layer(x)

        mask = layer.mask
        torch.testing.assert_close(y[:, mask], x[:, mask])
        assert not torch.allclose(y[:, ~mask], x[:, ~mask])

    def test_round_trip(self):
        """Test inverse(forward(x)) == x for n=2."""
        layer = self.make(2)
        x = 2.0 * torch.randn(256, 2, dtype=DTYPE)

        y, logdet = layer(x)
        x_back, inv_logdet = layer.inverse(y)

        assert (x_back - x).abs().max().item() < 1e-6
        assert (logdet + inv_logdet).abs().max().item() < 1e-6

    def test_logdet_matches_dense_jacobian(self):
        """Test the analytic logdet against a finite-difference Jacobian for n=3."""
        layer = self.make(3, seed=5)
        x = torch.randn(1, 3, dtype=DTYPE)

        _, logdet = layer(x)
        with torch.no_grad():
            jacobian = numerical_jacobian(lambda v: layer(v[None])[0][0], x[0])
        _, expected = torch.linalg.slogdet(jacobian)

        assert logdet.item() == pytest.approx(expected.item(), rel=1e-4, abs=1e-8)

    def test_dimension_mismatch(self):
        """Test an input of the wrong width is rejected."""
        layer = self.make(3)

        with pytest.raises(ValueError, match="Expected input of shape"):
            layer(torch.zeros(4, 2, dtype=DTYPE))

    def test_full_mask_rejected(self):
        """Test a mask that transforms nothing is rejected."""
        with pytest.raises(ValueError, match="no coordinate"):
            CouplingLayer(torch.ones(3, dtype=torch.bool), 4, 3.0, ConditionerSpec())

    def test_context_required(self):
        """Test a conditioned layer refuses a missing context."""
        layer = self.make(3, context_dim=2)

        with pytest.raises(ValueError, match="requires a context"):
            layer(torch.zeros(4, 3, dtype=DTYPE))

    def test_context_shape_checked(self):
        """Test a context of the wrong shape is rejected."""
        layer = self.make(3, context_dim=2)

        with pytest.raises(ValueError, match="Context shape"):
            layer(torch.zeros(4, 3, dtype=DTYPE), torch.zeros(4, 3, dtype=DTYPE))

    def test_context_changes_output(self):
        """Test distinct contexts give distinct outputs for the same input."""
        layer = self.make(3, context_dim=2, seed=2)
        x = torch.randn(8, 3, dtype=DTYPE)
        a = torch.zeros(8, 2, dtype=DTYPE)
        b = torch.ones(8, 2, dtype=DTYPE)

        y_a, _ = layer(x, a)
        y_b, _ = layer(x, b)

        assert not torch.allclose(y_a, y_b)

    def test_residual_conditioner(self):
        """Test a residual conditioner builds and round-trips."""
        spec = ConditionerSpec(hidden_layers=2, hidden_units=16, residual_blocks=2)
        layer = perturb(CouplingLayer(alternating_mask(3, 0), 5, 6.0, spec).to(DTYPE))
        x = torch.randn(64, 3, dtype=DTYPE)

        x_back, _ = layer.inverse(layer(x)[0])

        assert (x_back - x).abs().max().item() < 1e-6

    def test_unknown_activation(self):
        """Test an unknown activation name is rejected."""
        with pytest.raises(ValueError, match="Unknown activation"):
            CouplingLayer(alternating_mask(2, 0), 4, 3.0, ConditionerSpec(activation="swish"))


class TestLULinear:
    """Tests for LU-decomposed linear layers."""

    def test_identity_initialization(self):
        """Test L=U=I, P=I is the identity with zero logdet."""
        layer = LULinear(3).to(DTYPE)
        x = torch.randn(10, 3, dtype=DTYPE)

        y, logdet = layer(x)

        torch.testing.assert_close(y, x)
        assert (logdet == 0).all()

    def test_diagonal_logdet(self):
        """Test diag(U) = (2, 0.5) has zero log-determinant."""
        layer = LULinear(2).to(DTYPE)
        with torch.no_grad():
            layer.diagonal.copy_(torch.tensor([2.0, 0.5], dtype=DTYPE))

        _, logdet = layer(torch.randn(4, 2, dtype=DTYPE))

        torch.testing.assert_close(logdet, torch.zeros(4, dtype=DTYPE), atol=1e-15, rtol=0)

    def test_logdet_matches_slogdet(self):
        """Test the logdet against slogdet of the materialized matrix for n=5."""
        generator = torch.Generator().manual_seed(0)
        layer = perturb(LULinear(5, permutation=torch.randperm(5, generator=generator)).to(DTYPE))

        _, logdet = layer(torch.randn(1, 5, dtype=DTYPE))
        _, expected = torch.linalg.slogdet(layer.weight())

        assert abs(logdet.item() - expected.item()) < 1e-10

    def test_round_trip(self):
        """Test triangular-solve inverse undoes the forward map."""
        layer = perturb(LULinear(5).to(DTYPE), scale=0.3)
        x = torch.randn(128, 5, dtype=DTYPE)

        y, logdet = layer(x)
        x_back, inv_logdet = layer.inverse(y)

        torch.testing.assert_close(x_back, x, atol=1e-10, rtol=0)
        torch.testing.assert_close(logdet + inv_logdet, torch.zeros(128, dtype=DTYPE))

    def test_singular_diagonal(self):
        """Test |U_ii| below threshold raises a singularity error."""
        layer = LULinear(3).to(DTYPE)
        with torch.no_grad():
            layer.diagonal[1] = 1e-14

        with pytest.raises(FlowSingularityError, match="LU diagonal"):
            layer(torch.randn(2, 3, dtype=DTYPE))


class TestPermutation:
    """Tests for permutation layers."""

    def test_round_trip(self):
        """Test the inverse permutation restores the input."""
        layer = Permutation(torch.tensor([2, 0, 1]))
        x = torch.randn(5, 3, dtype=DTYPE)

        y, logdet = layer(x)
        x_back, _ = layer.inverse(y)

        torch.testing.assert_close(y[:, 0], x[:, 2])
        torch.testing.assert_close(x_back, x)
        assert (logdet == 0).all()

    def test_rejects_non_permutation(self):
        """Test repeated indices are rejected."""
        with pytest.raises(ValueError, match="Not a permutation"):
            Permutation(torch.tensor([0, 0, 1]))


class TestFlowTransform:
    """Tests for composed flows."""

    def test_empty_flow_is_identity(self):
        """Test an empty layer list is the identity."""
        flow = FlowTransform(3)
        x = torch.randn(7, 3, dtype=DTYPE)

        y, logdet = flow(x)

        torch.testing.assert_close(y, x)
        assert (logdet == 0).all()

    def test_two_layer_round_trip(self):
        """Test a 2-layer random flow on a batch of 128."""
        spec = ConditionerSpec(hidden_layers=2, hidden_units=32)
        flow = perturb(build_flow(2, 2, 8, 3.0, spec, seed=1).to(DTYPE))
        x = torch.randn(128, 2, dtype=DTYPE)

        y, logdet = flow(x)
        x_back, inv_logdet = flow.inverse(y)

        assert (x_back - x).abs().max().item() < 1e-5
        assert (logdet + inv_logdet).abs().max().item() < 1e-6

    @pytest.mark.parametrize("dim", [2, 3, 14])
    @pytest.mark.parametrize("linear", ["none", "permutation", "lu"])
    def test_composed_round_trip(self, dim, linear):
        """Test 4-layer flows on 10^4 points drawn from [-3B, 3B]^n."""
        bound = 3.0
        spec = ConditionerSpec(hidden_layers=2, hidden_units=32)
        flow = perturb(build_flow(dim, 4, 8, bound, spec, linear, seed=2).to(DTYPE))
        generator = torch.Generator().manual_seed(0)
        x = (torch.rand(10_000, dim, generator=generator, dtype=DTYPE) * 2 - 1) * 3 * bound

        with torch.no_grad():
            y, logdet = flow(x)
            x_back, inv_logdet = flow.inverse(y)

        assert (x_back - x).abs().max().item() < 1e-5
        assert (logdet + inv_logdet).abs().max().item() < 1e-6

    @pytest.mark.parametrize("dim", [2, 3, 4, 5])
    def test_logdet_matches_dense_jacobian(self, dim):
        """Test the composed logdet against a finite-difference Jacobian at 100 points."""
        spec = ConditionerSpec(hidden_layers=2, hidden_units=16)
        flow = perturb(build_flow(dim, 3, 6, 3.0, spec, "lu", seed=dim).to(DTYPE), seed=dim)
        generator = torch.Generator().manual_seed(dim)
        points = 1.5 * torch.randn(100, dim, dtype=DTYPE, generator=generator)

        with torch.no_grad():
            _, logdets = flow(points)
            for point, logdet in zip(points, logdets, strict=True):
                jacobian = numerical_jacobian(lambda v: flow(v[None])[0][0], point)
                _, expected = torch.linalg.slogdet(jacobian)
                assert logdet.item() == pytest.approx(expected.item(), rel=1e-4, abs=1e-6)

    def test_context_passed_to_couplings(self):
        """Test a conditioned flow uses its context."""
        spec = ConditionerSpec(hidden_layers=2, hidden_units=16, context_dim=2)
        flow = perturb(build_flow(3, 2, 6, 3.0, spec, "permutation").to(DTYPE))
        x = torch.randn(4, 3, dtype=DTYPE)
        context = torch.randn(4, 2, dtype=DTYPE)

        y, _ = flow(x, context)
        x_back, _ = flow.inverse(y, context)

        torch.testing.assert_close(x_back, x, atol=1e-8, rtol=0)

    def test_shape_checked(self):
        """Test a flow rejects inputs of the wrong width."""
        with pytest.raises(ValueError, match="Expected input of shape"):
            FlowTransform(3)(torch.zeros(2, 4))


class TestBuildFlow:
    """Tests for the flow builder."""

    def test_layer_structure(self):
        """Test permutations sit between couplings."""
        flow = build_flow(3, 3, 6, 3.0, ConditionerSpec(), "permutation")
        kinds = [type(layer).__name__ for layer in flow.layers]

        assert kinds == [
            "CouplingLayer",
            "Permutation",
            "CouplingLayer",
            "Permutation",
            "CouplingLayer",
        ]

    def test_masks_alternate(self):
        """Test consecutive couplings transform complementary coordinate sets."""
        flow = build_flow(2, 2, 6, 3.0, ConditionerSpec())

        assert not torch.equal(flow.layers[0].mask, flow.layers[1].mask)

    def test_seeded_permutations_reproducible(self):
        """Test equal seeds give equal permutations."""
        a = build_flow(5, 3, 4, 3.0, ConditionerSpec(), "permutation", seed=9)
        b = build_flow(5, 3, 4, 3.0, ConditionerSpec(), "permutation", seed=9)

        torch.testing.assert_close(a.layers[1].permutation, b.layers[1].permutation)

    def test_unknown_linear_transform(self):
        """Test unknown linear transform names are rejected."""
        with pytest.raises(ValueError, match="Unknown linear_transform"):
            build_flow(2, 2, 4, 3.0, ConditionerSpec(), "householder")
