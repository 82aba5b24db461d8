"""Tests for mpmflow.constitutive module."""

import math

import numpy as np
import pytest

from mpmflow.constitutive import (
    ACTIVE_PARAMS,
    IncompressibleLimitError,
    MaterialError,
    MaterialModel,
    MaterialParams,
    MaterialType,
    cauchy_stress,
    drucker_prager_alpha,
    kirchhoff_stress,
    lame_coefficients,
    return_map,
    yield_function,
)
from mpmflow.core import Dual, finite_difference

PARAMS = {
    MaterialType.ELASTIC: MaterialParams(E=1e5, nu=0.3),
    MaterialType.PLASTICINE: MaterialParams(E=2e5, nu=0.3, tau_y=2e3),
    MaterialType.METAL: MaterialParams(E=1e6, nu=0.3, tau_y=1e4),
    MaterialType.FOAM: MaterialParams(E=5e4, nu=0.2, eta=50.0),
    MaterialType.SAND: MaterialParams(theta_fric=30.0),
    MaterialType.NEWTONIAN_FLUID: MaterialParams(mu=5.0, kappa=2e4),
    MaterialType.NON_NEWTONIAN_FLUID: MaterialParams(mu=1e3, kappa=5e4, tau_y=100.0, eta=20.0),
}


def _rotation(angle: float, axis: int = 2) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _batch(*matrices) -> Dual:
    return Dual(np.stack(matrices))


class TestMaterialType:
    """Tests for MaterialType parsing."""

    def test_parse_is_lenient(self):
        """Test case, spaces and separators are ignored."""
        assert MaterialType.parse("non-newtonian fluid") == MaterialType.NON_NEWTONIAN_FLUID
        assert MaterialType.parse("ELASTIC") == MaterialType.ELASTIC
        assert MaterialType.parse(MaterialType.SAND) == MaterialType.SAND

    def test_parse_unknown_raises(self):
        """Test unknown names are rejected."""
        with pytest.raises(MaterialError):
            MaterialType.parse("rubber")

    def test_fluid_flag(self):
        """Test fluids are flagged."""
        assert MaterialType.NEWTONIAN_FLUID.is_fluid
        assert not MaterialType.METAL.is_fluid


class TestMaterialParams:
    """Tests for MaterialParams validation and conversion."""

    def test_active_names(self):
        """Test the active parameter sets."""
        assert MaterialParams.active_names(MaterialType.SAND) == ("theta_fric",)
        assert set(ACTIVE_PARAMS[MaterialType.FOAM]) == {"E", "nu", "eta"}

    def test_active_mask(self):
        """Test the mask flags exactly the active entries."""
        mask = MaterialParams().active_mask(MaterialType.NEWTONIAN_FLUID)
        assert [name for name, on in mask.items() if on] == ["mu", "kappa"]

    @pytest.mark.parametrize("kind", list(MaterialType))
    def test_reference_params_valid(self, kind):
        """Test every reference parameter set validates."""
        PARAMS[kind].validate(kind)

    def test_incompressible_limit(self):
        """Test nu = 0.5 raises the dedicated error."""
        with pytest.raises(IncompressibleLimitError):
            MaterialParams(E=1e5, nu=0.5).validate(MaterialType.ELASTIC)

    def test_missing_active_param(self):
        """Test a missing active entry is named."""
        with pytest.raises(MaterialError, match="tau_y"):
            MaterialParams(E=1e5, nu=0.3).validate(MaterialType.METAL)

    def test_friction_angle_range(self):
        """Test theta outside (0, 90) is rejected."""
        with pytest.raises(MaterialError):
            MaterialParams(theta_fric=90.0).validate(MaterialType.SAND)

    def test_negative_viscosity(self):
        """Test non-positive eta is rejected."""
        with pytest.raises(MaterialError):
            MaterialParams(E=1e5, nu=0.3, eta=0.0).validate(MaterialType.FOAM)

    def test_dict_round_trip(self):
        """Test to_dict/from_dict keep active values."""
        params = PARAMS[MaterialType.NON_NEWTONIAN_FLUID]
        data = params.to_dict(MaterialType.NON_NEWTONIAN_FLUID)
        assert MaterialParams.from_dict(data) == params

    def test_from_dict_unknown_name(self):
        """Test unknown keys are rejected."""
        with pytest.raises(MaterialError):
            MaterialParams.from_dict({"youngs": 1.0})

    def test_detached_drops_tangents(self):
        """Test Dual entries become floats."""
        params = MaterialParams(E=Dual.seed(1e5, 0, 1), nu=0.3).detached()
        assert params.E == 1e5 and isinstance(params.E, float)

    def test_model_density_checked(self):
        """Test non-positive density is rejected."""
        with pytest.raises(MaterialError):
            MaterialModel(MaterialType.ELASTIC, PARAMS[MaterialType.ELASTIC], 0.0).validate()


class TestElasticity:
    """Tests for stress evaluation."""

    def test_lame_coefficients(self):
        """Test the standard conversion."""
        mu, lam = lame_coefficients(MaterialParams(E=1e5, nu=0.3))
        assert mu == pytest.approx(1e5 / 2.6)
        assert lam == pytest.approx(1e5 * 0.3 / (1.3 * 0.4))

    @pytest.mark.parametrize("kind", list(MaterialType))
    def test_zero_stress_at_rest_and_rotation(self, kind):
        """Test tau = 0 at F = I and at pure rotations."""
        F = _batch(np.eye(3), _rotation(0.7), _rotation(-1.1, axis=0))
        tau = kirchhoff_stress(kind, PARAMS[kind], F)
        assert np.allclose(tau.val, 0.0, atol=1e-10 * max(PARAMS[kind].to_dict().values()))

    def test_stress_is_symmetric(self):
        """Test Kirchhoff stress symmetry for a sheared elastic body."""
        F = np.eye(3)
        F[0, 1] = 0.2
        kind = MaterialType.ELASTIC
        tau = kirchhoff_stress(kind, PARAMS[kind], _batch(F)).val[0]
        assert np.allclose(tau, tau.T, atol=1e-9)

    def test_stress_tangent_matches_fd(self):
        """Test d(tau)/dE against central differences."""
        F = np.diag([1.1, 0.95, 1.0])
        F[0, 2] = 0.05
        params = MaterialParams(E=Dual.seed(1e5, 0, 1), nu=0.3)
        tangent = kirchhoff_stress(MaterialType.ELASTIC, params, _batch(F)).tan[0, 0]

        def tau_at(E):
            return kirchhoff_stress(
                MaterialType.ELASTIC, MaterialParams(E=E, nu=0.3), _batch(F)
            ).val[0]

        assert np.allclose(tangent, finite_difference(tau_at, 1e5), rtol=1e-6, atol=1e-9)

    def test_newtonian_pressure_sign(self):
        """Test expansion produces tension."""
        F = _batch(np.eye(3) * 1.01)
        kind = MaterialType.NEWTONIAN_FLUID
        sigma = cauchy_stress(kind, PARAMS[kind], F)
        assert sigma.val[0, 0, 0] > 0.0

    def test_newtonian_viscous_term(self):
        """Test the viscous stress is 2 mu dev(sym L)."""
        L = np.zeros((3, 3))
        L[0, 1] = 1.0
        sigma = cauchy_stress(
            MaterialType.NEWTONIAN_FLUID,
            PARAMS[MaterialType.NEWTONIAN_FLUID],
            _batch(np.eye(3)),
            velocity_gradient=_batch(L),
        ).val[0]
        assert sigma[0, 1] == pytest.approx(5.0)
        assert sigma[1, 0] == pytest.approx(5.0)

    def test_fixed_corotated_uniaxial_stretch(self):
        """Test sigma for E=1e4, nu=0.3 under a 10% stretch along x."""
        E, nu, stretch = 1e4, 0.3, 1.1
        mu = E / (2.0 * (1.0 + nu))
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        J = stretch
        # R = I, so (F - R) F^T = diag(stretch (stretch - 1), 0, 0)
        expected = np.diag([
            (2.0 * mu * stretch * (stretch - 1.0) + lam * J * (J - 1.0)) / J,
            lam * (J - 1.0),
            lam * (J - 1.0),
        ])
        sigma = cauchy_stress(MaterialType.ELASTIC, MaterialParams(E=E, nu=nu),
                              _batch(np.diag([stretch, 1.0, 1.0]))).val[0]
        assert np.allclose(sigma, expected, rtol=1e-10, atol=1e-8)
        assert sigma[0, 0] == pytest.approx(1346.153846, rel=1e-8)
        assert sigma[1, 1] == pytest.approx(576.923077, rel=1e-8)

    @pytest.mark.parametrize("kind", list(MaterialType))
    def test_rotation_equivariance(self, kind):
        """Test sigma(Q F) = Q sigma(F) Q^T for a proper rotation Q."""
        F = np.array([[1.08, 0.06, -0.02], [0.03, 0.94, 0.05], [-0.04, 0.02, 1.03]])
        Q = _rotation(0.4, axis=0) @ _rotation(-0.9, axis=1) @ _rotation(1.3)
        sigma = cauchy_stress(kind, PARAMS[kind], _batch(F)).val[0]
        rotated = cauchy_stress(kind, PARAMS[kind], _batch(Q @ F)).val[0]
        scale = np.abs(sigma).max()
        assert np.allclose(rotated, Q @ sigma @ Q.T, rtol=1e-9, atol=1e-9 * scale)

    def test_inverted_gradient_rejected(self):
        """Test det(F) <= 0 is an error."""
        with pytest.raises(ValueError):
            kirchhoff_stress(MaterialType.ELASTIC, PARAMS[MaterialType.ELASTIC],
                             _batch(np.diag([1.0, 1.0, -1.0])))


class TestReturnMapping:
    """Tests for plastic projection."""

    SHEAR = np.diag([1.2, 1.0 / 1.2, 1.0])
    COMPRESSED_SHEAR = np.diag([0.9, 0.95, 1.1])

    def test_elastic_identity(self):
        """Test elastic material is never projected."""
        F = _batch(self.SHEAR)
        out = return_map(MaterialType.ELASTIC, PARAMS[MaterialType.ELASTIC], F, 1e-4)
        assert np.array_equal(out.val, F.val)

    @pytest.mark.parametrize("kind", [MaterialType.PLASTICINE, MaterialType.METAL])
    def test_von_mises_consistency(self, kind):
        """Test projected states lie on the yield surface."""
        out = return_map(kind, PARAMS[kind], _batch(self.SHEAR), 1e-4)
        scale = PARAMS[kind].tau_y
        assert abs(yield_function(kind, PARAMS[kind], out)[0]) <= 1e-8 * scale

    @pytest.mark.parametrize("kind", [MaterialType.PLASTICINE, MaterialType.METAL,
                                      MaterialType.SAND])
    def test_idempotent(self, kind):
        """Test projecting twice equals projecting once."""
        F = _batch(self.SHEAR, self.COMPRESSED_SHEAR, np.eye(3))
        once = return_map(kind, PARAMS[kind], F, 1e-4)
        twice = return_map(kind, PARAMS[kind], once, 1e-4)
        assert np.allclose(twice.val, once.val, atol=1e-8)

    def test_von_mises_preserves_volume(self):
        """Test the projection keeps det(F)."""
        kind = MaterialType.METAL
        out = return_map(kind, PARAMS[kind], _batch(self.SHEAR), 1e-4)
        assert np.linalg.det(out.val[0]) == pytest.approx(np.linalg.det(self.SHEAR))

    def test_below_yield_untouched(self):
        """Test a tiny strain stays elastic."""
        kind = MaterialType.METAL
        F = _batch(np.diag([1.001, 1.0, 1.0]))
        out = return_map(kind, PARAMS[kind], F, 1e-4)
        assert np.array_equal(out.val, F.val)

    def test_sand_cone_consistency(self):
        """Test compressed sand lands on the cone."""
        kind = MaterialType.SAND
        out = return_map(kind, PARAMS[kind], _batch(self.COMPRESSED_SHEAR), 1e-4)
        assert abs(yield_function(kind, PARAMS[kind], out)[0]) <= 1e-8

    def test_sand_tip_under_expansion(self):
        """Test expanding sand collapses to a pure rotation."""
        kind = MaterialType.SAND
        F = _rotation(0.3) @ np.diag([1.1, 1.05, 1.02])
        out = return_map(kind, PARAMS[kind], _batch(F), 1e-4).val[0]
        assert np.allclose(out @ out.T, np.eye(3), atol=1e-12)
        assert np.allclose(out, _rotation(0.3), atol=1e-12)

    def test_sand_pure_shear_onto_cone(self):
        """Test a traceless Hencky shear ends on the cone with no shear left."""
        kind = MaterialType.SAND
        R = _rotation(0.5, axis=1)
        F = R @ np.diag([math.exp(0.2), math.exp(-0.2), 1.0])
        out = return_map(kind, PARAMS[kind], _batch(F), 1e-4)
        assert abs(yield_function(kind, PARAMS[kind], out)[0]) <= 1e-8
        assert np.allclose(out.val[0], R, atol=1e-8)

    def test_newtonian_isochoric_shear_erased(self):
        """Test diag(2, 0.5, 1) has J = 1 and maps to the identity."""
        kind = MaterialType.NEWTONIAN_FLUID
        out = return_map(kind, PARAMS[kind], _batch(np.diag([2.0, 0.5, 1.0])), 1e-4).val[0]
        assert np.allclose(out, np.eye(3), atol=1e-12)

    def test_newtonian_keeps_volume(self):
        """Test F becomes J^(1/3) I with J unchanged."""
        kind = MaterialType.NEWTONIAN_FLUID
        F = np.diag([1.1, 0.9, 1.05])
        F[0, 1] = 0.1
        out = return_map(kind, PARAMS[kind], _batch(F), 1e-4).val[0]
        assert np.linalg.det(out) == pytest.approx(np.linalg.det(F), abs=1e-12)
        assert np.allclose(out, np.eye(3) * out[0, 0])

    def test_foam_large_step_removes_shear(self):
        """Test a saturated foam step leaves only the volumetric part."""
        kind = MaterialType.FOAM
        out = return_map(kind, PARAMS[kind], _batch(self.SHEAR), 10.0).val[0]
        assert np.allclose(out, np.eye(3) * out[0, 0], atol=1e-12)

    def test_non_newtonian_relaxes_excess(self):
        """Test the yielded deviatoric strain shrinks but stays above the radius."""
        kind = MaterialType.NON_NEWTONIAN_FLUID
        params = PARAMS[kind]
        out = return_map(kind, params, _batch(self.SHEAR), 1e-2).val[0]
        eps = np.log(np.linalg.svd(out, compute_uv=False))
        dev = np.linalg.norm(eps - eps.mean())
        eps0 = np.log(np.linalg.svd(self.SHEAR, compute_uv=False))
        radius = math.sqrt(2.0 / 3.0) * params.tau_y / (2.0 * params.mu)
        assert radius < dev < np.linalg.norm(eps0 - eps0.mean())

    def test_return_map_tangent_matches_fd(self):
        """Test d(F_new)/d(tau_y) for a yielding metal."""
        kind = MaterialType.METAL
        params = MaterialParams(E=1e6, nu=0.3, tau_y=Dual.seed(1e4, 0, 1))
        tangent = return_map(kind, params, _batch(self.SHEAR), 1e-4).tan[0, 0]

        def f_at(tau_y):
            return return_map(kind, MaterialParams(E=1e6, nu=0.3, tau_y=tau_y),
                              _batch(self.SHEAR), 1e-4).val[0]

        assert np.allclose(tangent, finite_difference(f_at, 1e4), rtol=1e-5, atol=1e-10)

    def test_zero_viscosity_rejected(self):
        """Test eta <= 0 raises for viscous materials."""
        with pytest.raises(MaterialError):
            return_map(MaterialType.FOAM, MaterialParams(E=1e5, nu=0.3, eta=0.0),
                       _batch(self.SHEAR), 1e-4)

    def test_yield_function_undefined_for_elastic(self):
        """Test elastic material has no yield surface."""
        with pytest.raises(MaterialError):
            yield_function(MaterialType.ELASTIC, PARAMS[MaterialType.ELASTIC],
                           _batch(np.eye(3)))


class TestDruckerPrager:
    """Tests for the friction coefficient."""

    def test_alpha_at_thirty_degrees(self):
        """Test alpha(30) = sqrt(2/3) * 2 * 0.5 / 2.5."""
        alpha = drucker_prager_alpha(30.0)
        assert float(alpha.val) == pytest.approx(math.sqrt(2.0 / 3.0) * 0.4)

    def test_alpha_increases_with_angle(self):
        """Test a steeper angle gives a wider cone."""
        assert float(drucker_prager_alpha(40.0).val) > float(drucker_prager_alpha(20.0).val)
