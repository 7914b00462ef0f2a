import csv
import dataclasses
import warnings

import numpy as np
import pytest

from hessgame import fields, linalg
from hessgame.domain import BarrierDomain
from hessgame.errors import NotConverged, OutOfGrid
from hessgame.linalg import Projection
from hessgame.operators import ControlPair, OperatorSpec, optimal_controls
from conftest import random_sym
from hessgame.solver import (
    Grid,
    consistency_on_quadratic,
    delta_continuation,
    discretize_generator,
    interpolate,
    max_error,
    policy_iteration,
    residual_report,
    stencil_multiple,
)

DISK = BarrierDomain.unit_ball(2)
BALL = BarrierDomain.unit_ball(3)
LAP2 = OperatorSpec.sum_extremes(2, 1, 1)
NC3 = OperatorSpec.sum_extremes(3, 1, 1)
G3 = fields.parse_polynomial(3, "1:2,0,0; -1:0,0,2; 0.5:1,1,0; 1:1,1,1")


def bowl(x):
    return 1.0 - np.sum(np.asarray(x) ** 2, axis=-1)


@pytest.fixture(scope="module")
def harmonic16():
    return policy_iteration(LAP2, Grid.build(DISK, 1 / 16), fields.constant(2), fields.harmonic_quadratic(2), tol=1e-9)


@pytest.fixture(scope="module")
def nonconvex6():
    return policy_iteration(NC3, Grid.build(BALL, 1 / 6), fields.constant(3), G3, tol=1e-8)


class TestGrid:
    def test_interior_nodes_inside(self):
        grid = Grid.build(BarrierDomain.ellipsoid((1.0, 0.6)), 1 / 16)
        assert np.all(grid.domain.psi(grid.points) > 0)
        assert grid.n_interior == grid.points.shape[0]
        assert grid.rho == stencil_multiple(1 / 16, 2) * grid.h

    def test_interpolation_exact_on_multilinear(self, rng):
        grid = Grid.build(DISK, 1 / 8)
        lin = fields.linear(2, (0.3, -1.2), 0.7)
        lat = lin(grid.node_coords()).reshape(grid.shape)
        x = DISK.sample_interior(50, rng)
        assert np.allclose(interpolate(grid, lat, x), lin(x), atol=1e-12)
        with pytest.raises(OutOfGrid):
            interpolate(grid, lat, np.array([[5.0, 0.0]]))

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            Grid.build(DISK, 0.0)


class TestGenerator:
    def test_lattice_aligned_quadratic_exact(self):
        grid = Grid.build(BALL, 1 / 8)
        gamma = np.diag([1.0, -2.0, 0.5]) + 0.3 * (np.eye(3, k=1) + np.eye(3, k=-1))
        e = np.eye(3)
        pair = ControlPair(alpha=Projection.from_basis(e[:, :1]), beta=Projection.from_basis(e[:, 2:]))
        vals, exact = consistency_on_quadratic(NC3, grid, gamma, pair)
        assert np.max(np.abs(vals - exact)) <= 1e-8

    def test_harmonic_identity_generator(self):
        grid = Grid.build(DISK, 1 / 16)
        pair = ControlPair(alpha=Projection.from_basis(np.eye(2)[:, :1]), beta=Projection.from_basis(np.eye(2)[:, 1:]))
        vals, exact = consistency_on_quadratic(LAP2, grid, np.diag([2.0, -2.0]), pair)
        assert exact == 0.0
        assert np.max(np.abs(vals)) <= 1e-8

    def test_quadratic_consistency_general_frames(self, rng):
        grid = Grid.build(BALL, 1 / 8)
        gamma = random_sym(rng, 3)
        pair = optimal_controls(NC3, rng.standard_normal((3, 3)) + np.eye(3))
        vals, exact = consistency_on_quadratic(NC3, grid, gamma, pair)
        # interpolation error O(h^2 / rho^2) |gamma|
        assert np.max(np.abs(vals - exact)) <= 2 * grid.h**2 / grid.rho**2 * np.abs(gamma).sum()

    def test_delta_adds_discrete_laplacian(self, harmonic16):
        pts = harmonic16.grid.points
        x = pts[np.argmin(np.linalg.norm(pts - [0.25, -0.125], axis=1))]
        pair = optimal_controls(LAP2, np.diag([1.0, -1.0]))
        base = discretize_generator(pair, harmonic16, x, delta=0.0)
        with_delta = discretize_generator(pair, harmonic16, x, delta=0.3)
        h = harmonic16.h
        u = harmonic16.interpolate
        e = np.eye(2) * h
        lap = sum(u(x + e[i]) - 2 * u(x) + u(x - e[i]) for i in range(2)) / h**2
        assert with_delta - base == pytest.approx(0.5 * 0.3**2 * lap, abs=1e-10)


class TestPolicyIteration:
    def test_constant_data(self):
        fl = policy_iteration(NC3, Grid.build(BALL, 1 / 4), fields.constant(3), fields.constant(3, 3.25))
        assert np.array_equal(fl.values, np.full_like(fl.values, 3.25))
        assert residual_report(fl).max_residual <= 1e-12

    def test_harmonic_oracle(self, harmonic16):
        assert harmonic16.converged
        assert max_error(harmonic16, fields.harmonic_quadratic(2)) <= 5e-2

    def test_poisson_oracle(self):
        # u = 1 - |x|^2 has Laplacian -2d, so H[u] + f = 0 needs f = +2d
        fl = policy_iteration(LAP2, Grid.build(DISK, 1 / 16), fields.constant(2, 4.0), fields.constant(2))
        assert fl.converged
        assert max_error(fl, bowl) <= 5e-2

    def test_converged_residual(self, nonconvex6):
        assert nonconvex6.converged
        assert residual_report(nonconvex6).max_residual <= 1e-8

    def test_maximum_principle(self, nonconvex6):
        psi = BALL.psi(nonconvex6.grid.node_coords())
        gb = G3(BALL.project_to_boundary(nonconvex6.grid.node_coords()[psi <= 0]))
        assert np.all(nonconvex6.values >= gb.min() - 1e-8)
        assert np.all(nonconvex6.values <= gb.max() + 1e-8)

    def test_comparison(self, rng):
        grid = Grid.build(BALL, 1 / 4)
        for _ in range(5):
            coeffs = rng.standard_normal(3)
            quad = random_sym(rng, 3)
            g2 = fields.Polynomial(3, fields.quadratic_form(quad).terms + fields.linear(3, coeffs).terms)
            bump = fields.quadratic_form(np.diag(rng.uniform(0, 1, 3)), offset=rng.uniform(0, 0.5))
            g1 = fields.Polynomial(3, g2.terms + bump.terms)  # g1 >= g2
            f2 = fields.constant(3, rng.normal())
            f1 = fields.constant(3, f2.terms[0][0] + rng.uniform(0, 1))
            u1 = policy_iteration(NC3, grid, f1, g1, tol=1e-9).values
            u2 = policy_iteration(NC3, grid, f2, g2, tol=1e-9).values
            assert np.all(u1 >= u2 - 1e-9)

    def test_rotation_echo(self, rng, nonconvex6):
        q = linalg.haar_orthogonal(3, rng)

        class Rotated:
            def __call__(self, x):
                return G3(np.asarray(x) @ q)

        fl = policy_iteration(NC3, nonconvex6.grid, fields.constant(3), Rotated(), tol=1e-8)
        x = fl.grid.points[BALL.psi(fl.grid.points) > 0.1]
        echo = np.abs(fl.interpolate(x) - nonconvex6.interpolate(x @ q)).max()
        # the scheme error at this spacing, measured on the rotated harmonic problem, is below 0.05
        assert echo <= 2 * 0.05

    def test_not_converged(self):
        grid = Grid.build(BALL, 1 / 6)
        with pytest.raises(NotConverged) as info:
            policy_iteration(NC3, grid, fields.constant(3), G3, tol=1e-14, max_iter=0, strict=True)
        assert info.value.field is not None and not info.value.field.converged
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fl = policy_iteration(NC3, grid, fields.constant(3), G3, tol=1e-14, max_iter=0)
        assert not fl.converged and caught

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            policy_iteration(NC3, Grid.build(DISK, 1 / 4), fields.constant(2), fields.constant(2))


class TestDiscount:
    def test_constant_solution(self):
        # c u = f with u = g = C solves the discounted problem exactly
        fl = policy_iteration(NC3, Grid.build(BALL, 1 / 4), fields.constant(3, 1.5), fields.constant(3, 0.75), c=2.0)
        assert np.allclose(fl.values, 0.75, atol=1e-10)

    def test_discount_lowers_value(self):
        grid = Grid.build(DISK, 1 / 8)
        u0 = policy_iteration(LAP2, grid, fields.constant(2, 4.0), fields.constant(2)).values
        u1 = policy_iteration(LAP2, grid, fields.constant(2, 4.0), fields.constant(2), c=1.0).values
        assert np.all(u1 <= u0 + 1e-12) and np.any(u1 < u0 - 1e-3)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            policy_iteration(LAP2, Grid.build(DISK, 1 / 4), fields.constant(2), fields.constant(2), c=-1.0)


class TestResidual:
    def test_perturbation_detected(self, harmonic16):
        grid = harmonic16.grid
        i = int(np.argmin(np.linalg.norm(grid.points, axis=1)))
        pert = dataclasses.replace(harmonic16, values=harmonic16.values.copy(), lattice=harmonic16.lattice.copy())
        pert.values[i] += 1e-2
        pert.lattice.reshape(-1)[grid.interior[i]] += 1e-2
        diag = 2 * 2.0 / grid.rho**2  # two unit directions, each 2 / rho^2
        assert residual_report(pert).max_residual >= 1e-2 * diag / 2


class TestContinuation:
    def test_single_zero(self):
        res = delta_continuation(LAP2, Grid.build(DISK, 1 / 8), fields.constant(2), fields.harmonic_quadratic(2), [0.0])
        assert len(res.fields) == 1 and res.gaps == [0.0]

    def test_quadratic_gaps_linear_case(self):
        # (1 + delta^2 / 2) Lap u = -4 gives u = (1 - |x|^2) / (1 + delta^2 / 2)
        res = delta_continuation(LAP2, Grid.build(DISK, 1 / 16), fields.constant(2, 4.0), fields.constant(2),
                                 [0.4, 0.2, 0.1, 0.0], tol=1e-9)
        g = res.gaps
        assert g[-1] == 0.0
        for a, b in zip(g[:2], g[1:3]):
            assert 3.0 <= a / b <= 5.0
        assert g[0] == pytest.approx(1 - 1 / 1.08, rel=0.1)

    def test_order_checked(self):
        with pytest.raises(ValueError):
            delta_continuation(LAP2, Grid.build(DISK, 1 / 8), fields.constant(2), fields.constant(2), [0.1, 0.2])


class TestOutput:
    def test_csv_and_diagnostics(self, harmonic16, tmp_path):
        path = tmp_path / "field.csv"
        harmonic16.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "x2", "value"]
        assert len(rows) == harmonic16.grid.n_interior + 1
        back = np.array([[float(v) for v in r] for r in rows[1:]])
        assert np.allclose(back[:, 2], harmonic16.values, atol=1e-10)
        text = harmonic16.diagnostics_text()
        assert '"residual"' in text and '"iterations"' in text and '"delta": 0.0' in text
