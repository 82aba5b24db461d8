"""
Material Models

Stress evaluation and plastic return mappings for the seven supported
material kinds:
- Elastic, Plasticine, Metal, Foam, Sand: fixed-corotated hyperelasticity
- NewtonianFluid: linear equation of state plus viscous deviator
- NonNewtonianFluid: Hencky-strain shear with viscous overstress relaxation

Parameters may be plain floats or ``Dual`` scalars; in the latter case every
stress and projected deformation gradient carries parameter tangents.

Usage:
    from mpmflow.constitutive import MaterialType, MaterialParams, cauchy_stress

    params = MaterialParams(E=1e5, nu=0.3)
    sigma = cauchy_stress(MaterialType.ELASTIC, params, F, L)
"""

import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .core import (
    Dual,
    InvertedElementError,
    NonFiniteError,
    as_dual,
    cbrt,
    clip,
    deviatoric,
    det3,
    exp,
    log,
    polar_rotation,
    safe_norm,
    sin,
    svd3,
    symmetric,
    where,
)

_EYE3 = np.eye(3)

# Sand keeps fixed elastic constants; only the friction angle is identified.
SAND_E = 1e6
SAND_NU = 0.3


class MaterialError(ValueError):
    """Raised for invalid material parameters or models."""
    pass


class IncompressibleLimitError(MaterialError):
    """Raised when Poisson's ratio reaches the incompressible limit 0.5."""
    pass


class MaterialType(Enum):
    """Supported constitutive models."""
    ELASTIC = "Elastic"
    PLASTICINE = "Plasticine"
    METAL = "Metal"
    FOAM = "Foam"
    SAND = "Sand"
    NEWTONIAN_FLUID = "NewtonianFluid"
    NON_NEWTONIAN_FLUID = "NonNewtonianFluid"

    @classmethod
    def parse(cls, name: str) -> "MaterialType":
        """Parse a type name, ignoring case, spaces, hyphens and underscores."""
        if isinstance(name, MaterialType):
            return name
        key = "".join(ch for ch in str(name).lower() if ch not in " _-")
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        valid = ", ".join(kind.value for kind in cls)
        raise MaterialError(f"Unknown material type '{name}' (expected one of: {valid})")

    @property
    def is_fluid(self) -> bool:
        return self in (MaterialType.NEWTONIAN_FLUID, MaterialType.NON_NEWTONIAN_FLUID)


PARAM_NAMES: Tuple[str, ...] = ("E", "nu", "tau_y", "eta", "mu", "kappa", "theta_fric")

ACTIVE_PARAMS: Dict[MaterialType, Tuple[str, ...]] = {
    MaterialType.ELASTIC: ("E", "nu"),
    MaterialType.PLASTICINE: ("E", "nu", "tau_y"),
    MaterialType.METAL: ("E", "nu", "tau_y"),
    MaterialType.FOAM: ("E", "nu", "eta"),
    MaterialType.SAND: ("theta_fric",),
    MaterialType.NEWTONIAN_FLUID: ("mu", "kappa"),
    MaterialType.NON_NEWTONIAN_FLUID: ("mu", "kappa", "tau_y", "eta"),
}

PARAM_UNITS: Dict[str, str] = {
    "E": "Pa",
    "nu": "-",
    "tau_y": "Pa",
    "eta": "Pa*s",
    "mu": "Pa",
    "kappa": "Pa",
    "theta_fric": "deg",
}


@dataclass
class MaterialParams:
    """
    Material parameter vector.

    Entries not active for the material kind are ignored. Values are floats
    or ``Dual`` scalars when tangents are being propagated.
    """
    E: Any = None
    nu: Any = None
    tau_y: Any = None
    eta: Any = None
    mu: Any = None
    kappa: Any = None
    theta_fric: Any = None

    @staticmethod
    def active_names(kind: MaterialType) -> Tuple[str, ...]:
        return ACTIVE_PARAMS[MaterialType.parse(kind)]

    def active_mask(self, kind: MaterialType) -> Dict[str, bool]:
        active = self.active_names(kind)
        return {name: name in active for name in PARAM_NAMES}

    def value(self, name: str) -> float:
        """Physical value of one entry as a float (tangents dropped)."""
        raw = getattr(self, name)
        if raw is None:
            raise MaterialError(f"Parameter '{name}' is not set")
        return float(raw.val) if isinstance(raw, Dual) else float(raw)

    def validate(self, kind: MaterialType) -> "MaterialParams":
        """Check that every active entry is present and inside its range."""
        kind = MaterialType.parse(kind)
        missing = [name for name in ACTIVE_PARAMS[kind] if getattr(self, name) is None]
        if missing:
            raise MaterialError(
                f"{kind.value} requires parameters {list(ACTIVE_PARAMS[kind])}; "
                f"missing {missing}"
            )
        for name in ACTIVE_PARAMS[kind]:
            value = self.value(name)
            if not math.isfinite(value):
                raise MaterialError(f"Parameter '{name}' must be finite, got {value}")
            if name == "nu":
                if value >= 0.5:
                    raise IncompressibleLimitError(f"nu must be < 0.5, got {value}")
                if value <= 0.0:
                    raise MaterialError(f"nu must be > 0, got {value}")
            elif name == "theta_fric":
                if not 0.0 < value < 90.0:
                    raise MaterialError(f"theta_fric must lie in (0, 90) degrees, got {value}")
            elif value <= 0.0:
                raise MaterialError(f"Parameter '{name}' must be > 0, got {value}")
        return self

    def detached(self) -> "MaterialParams":
        """Copy with every Dual replaced by its float value."""
        values = {}
        for f in fields(self):
            raw = getattr(self, f.name)
            values[f.name] = float(raw.val) if isinstance(raw, Dual) else raw
        return MaterialParams(**values)

    def with_values(self, **updates) -> "MaterialParams":
        return replace(self, **updates)

    def to_dict(self, kind: Optional[MaterialType] = None) -> Dict[str, float]:
        names = ACTIVE_PARAMS[MaterialType.parse(kind)] if kind is not None else PARAM_NAMES
        return {name: self.value(name) for name in names if getattr(self, name) is not None}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "MaterialParams":
        unknown = set(data) - set(PARAM_NAMES)
        if unknown:
            raise MaterialError(f"Unknown parameter names: {sorted(unknown)}")
        return cls(**{name: float(value) for name, value in data.items() if value is not None})


@dataclass
class MaterialModel:
    """A material kind bound to its parameters and density [kg/m^3]."""
    kind: MaterialType
    params: MaterialParams
    density: float

    def __post_init__(self):
        self.kind = MaterialType.parse(self.kind)

    def validate(self) -> "MaterialModel":
        if not (self.density > 0.0 and math.isfinite(self.density)):
            raise MaterialError(f"density must be > 0, got {self.density}")
        self.params.validate(self.kind)
        return self


# -- helpers ---------------------------------------------------------------


def _param(params: MaterialParams, name: str) -> Dual:
    raw = getattr(params, name)
    if raw is None:
        raise MaterialError(f"Parameter '{name}' is required but not set")
    return as_dual(raw)


def _check_orientation(F: Dual, what: str):
    if not np.all(np.isfinite(F.val)):
        raise NonFiniteError(f"{what} received non-finite deformation gradient")
    dets = np.linalg.det(F.val)
    if np.any(dets <= 0.0):
        raise InvertedElementError(
            f"{what} requires det(F) > 0, got min det {float(np.min(dets)):.3e}"
        )


def _scalar_matrix(s: Dual) -> Dual:
    """Turn a batch of scalars into ``s * I``."""
    return s[..., None, None] * _EYE3


def lame_coefficients(params: MaterialParams) -> Tuple[Any, Any]:
    """
    Convert Young's modulus and Poisson's ratio to Lame coefficients.

    Returns ``(mu_L, lambda_L)`` as floats or Duals matching the inputs.
    """
    E = params.value("E")
    nu = params.value("nu")
    if nu >= 0.5:
        raise IncompressibleLimitError(f"nu must be < 0.5, got {nu}")
    if E <= 0.0 or nu <= -1.0:
        raise MaterialError(f"Invalid elastic constants E={E}, nu={nu}")
    E_raw, nu_raw = params.E, params.nu
    mu_L = E_raw / (2.0 * (1.0 + nu_raw))
    lam_L = E_raw * nu_raw / ((1.0 + nu_raw) * (1.0 - 2.0 * nu_raw))
    return mu_L, lam_L


def _elastic_lame(kind: MaterialType, params: MaterialParams) -> Tuple[Any, Any]:
    if kind == MaterialType.SAND:
        return lame_coefficients(MaterialParams(E=SAND_E, nu=SAND_NU))
    return lame_coefficients(params)


def drucker_prager_alpha(theta_fric) -> Any:
    """Friction coefficient of the Drucker-Prager cone for an angle in degrees."""
    s = sin(as_dual(theta_fric) * (math.pi / 180.0))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


# -- stress ----------------------------------------------------------------


def kirchhoff_stress(kind: MaterialType, params: MaterialParams, F: Dual,
                     velocity_gradient: Optional[Dual] = None) -> Dual:
    """Kirchhoff stress ``tau = J * sigma`` for a batch of elastic gradients."""
    kind = MaterialType.parse(kind)
    F = as_dual(F)
    _check_orientation(F, "kirchhoff_stress")
    J = det3(F)

    if kind == MaterialType.NEWTONIAN_FLUID:
        return J[..., None, None] * _newtonian_cauchy(params, J, velocity_gradient)

    if kind == MaterialType.NON_NEWTONIAN_FLUID:
        mu, kappa = _param(params, "mu"), _param(params, "kappa")
        decomposition = svd3(F)
        eps = log(decomposition.sigma)
        tr = eps.sum(axis=-1)
        t = 2.0 * mu * (eps - (tr / 3.0)[..., None]) + (kappa * tr)[..., None]
        # U diag(t / s) V^T F^T == U diag(t) U^T
        return decomposition.reconstruct(t / decomposition.sigma) @ F.T

    mu_L, lam_L = _elastic_lame(kind, params)
    R = polar_rotation(F)
    return 2.0 * mu_L * ((F - R) @ F.T) + _scalar_matrix(lam_L * J * (J - 1.0))


def _newtonian_cauchy(params: MaterialParams, J: Dual, velocity_gradient: Optional[Dual]) -> Dual:
    mu, kappa = _param(params, "mu"), _param(params, "kappa")
    # tension on expansion: sigma_vol = kappa (J - 1) I
    sigma = _scalar_matrix(kappa * (J - 1.0))
    if velocity_gradient is not None:
        sigma = sigma + 2.0 * mu * deviatoric(symmetric(velocity_gradient))
    return sigma


def cauchy_stress(kind: MaterialType, params: MaterialParams, F_elastic: Dual,
                  velocity_gradient: Optional[Dual] = None) -> Dual:
    """Cauchy stress for a batch of elastic deformation gradients."""
    kind = MaterialType.parse(kind)
    F_elastic = as_dual(F_elastic)
    if kind == MaterialType.NEWTONIAN_FLUID:
        _check_orientation(F_elastic, "cauchy_stress")
        return _newtonian_cauchy(params, det3(F_elastic), velocity_gradient)
    tau = kirchhoff_stress(kind, params, F_elastic, velocity_gradient)
    return tau / det3(F_elastic)[..., None, None]


# -- return mapping --------------------------------------------------------


def _hencky(F: Dual):
    decomposition = svd3(F)
    eps = log(decomposition.sigma)
    mean = eps.sum(axis=-1) / 3.0
    eps_hat = eps - mean[..., None]
    return decomposition, eps, mean, eps_hat


def _positive(name: str, params: MaterialParams) -> Dual:
    value = params.value(name)
    if value <= 0.0:
        raise MaterialError(f"Viscous materials require {name} > 0, got {value}")
    return _param(params, name)


def _von_mises(params: MaterialParams, F: Dual, kind: MaterialType) -> Dual:
    mu_L, _ = _elastic_lame(kind, params)
    tau_y = _param(params, "tau_y")
    decomposition, eps, mean, eps_hat = _hencky(F)
    norm = safe_norm(eps_hat)
    radius = math.sqrt(2.0 / 3.0) * tau_y / (2.0 * mu_L)
    yielding = (norm - radius).val > 0.0
    if not np.any(yielding):
        return F
    scale = radius / where(norm.val > 0.0, norm, 1.0)
    eps_new = mean[..., None] + scale[..., None] * eps_hat
    projected = decomposition.reconstruct(exp(eps_new))
    return where(yielding[..., None, None], projected, F)


def _foam(params: MaterialParams, F: Dual, dt: float) -> Dual:
    mu_L, _ = lame_coefficients(params)
    eta = _positive("eta", params)
    decomposition, eps, mean, eps_hat = _hencky(F)
    factor = clip(dt * 2.0 * mu_L / eta, 0.0, 1.0)
    eps_new = eps - factor * eps_hat
    return decomposition.reconstruct(exp(eps_new))


def _sand(params: MaterialParams, F: Dual) -> Dual:
    mu_L, lam_L = _elastic_lame(MaterialType.SAND, params)
    alpha = drucker_prager_alpha(_param(params, "theta_fric"))
    decomposition, eps, mean, eps_hat = _hencky(F)
    tr = 3.0 * mean
    norm = safe_norm(eps_hat)
    delta_gamma = norm + (3.0 * lam_L + 2.0 * mu_L) / (2.0 * mu_L) * tr * alpha

    expanding = tr.val >= 0.0
    inside = (~expanding) & (delta_gamma.val <= 0.0)
    if np.all(inside):
        return F
    shrink = delta_gamma / where(norm.val > 0.0, norm, 1.0)
    eps_cone = eps - shrink[..., None] * eps_hat
    projected = decomposition.reconstruct(exp(eps_cone))
    tip = decomposition.reconstruct(np.ones(eps.shape))
    out = where(expanding[..., None, None], tip, projected)
    return where(inside[..., None, None], F, out)


def _newtonian(F: Dual) -> Dual:
    return _scalar_matrix(cbrt(det3(F)))


def _non_newtonian(params: MaterialParams, F: Dual, dt: float) -> Dual:
    mu = _param(params, "mu")
    tau_y = _param(params, "tau_y")
    eta = _positive("eta", params)
    decomposition, eps, mean, eps_hat = _hencky(F)
    norm = safe_norm(eps_hat)
    radius = math.sqrt(2.0 / 3.0) * tau_y / (2.0 * mu)
    excess = norm - radius
    yielding = excess.val > 0.0
    if not np.any(yielding):
        return F
    relaxed = radius + excess / (1.0 + 2.0 * mu * dt / eta)
    scale = relaxed / where(norm.val > 0.0, norm, 1.0)
    eps_new = mean[..., None] + scale[..., None] * eps_hat
    projected = decomposition.reconstruct(exp(eps_new))
    return where(yielding[..., None, None], projected, F)


def return_map(kind: MaterialType, params: MaterialParams, F_trial: Dual, dt: float) -> Dual:
    """Project a batch of trial elastic gradients onto the admissible set."""
    kind = MaterialType.parse(kind)
    if not dt > 0.0:
        raise MaterialError(f"dt must be > 0, got {dt}")
    F_trial = as_dual(F_trial)
    _check_orientation(F_trial, "return_map")

    if kind == MaterialType.ELASTIC:
        return F_trial
    if kind in (MaterialType.PLASTICINE, MaterialType.METAL):
        return _von_mises(params, F_trial, kind)
    if kind == MaterialType.FOAM:
        return _foam(params, F_trial, dt)
    if kind == MaterialType.SAND:
        return _sand(params, F_trial)
    if kind == MaterialType.NEWTONIAN_FLUID:
        return _newtonian(F_trial)
    return _non_newtonian(params, F_trial, dt)


def yield_function(kind: MaterialType, params: MaterialParams, F_elastic: Dual) -> np.ndarray:
    """
    Yield function value per particle (<= 0 means admissible).

    Von Mises kinds report in stress units, Sand in strain units.
    """
    kind = MaterialType.parse(kind)
    F_elastic = as_dual(F_elastic).detach()
    params = params.detached()
    _, eps, mean, eps_hat = _hencky(F_elastic)
    norm = np.linalg.norm(eps_hat.val, axis=-1)
    if kind in (MaterialType.PLASTICINE, MaterialType.METAL):
        mu_L, _ = lame_coefficients(params)
        return 2.0 * mu_L * norm - math.sqrt(2.0 / 3.0) * params.tau_y
    if kind == MaterialType.SAND:
        mu_L, lam_L = _elastic_lame(kind, params)
        alpha = float(drucker_prager_alpha(params.theta_fric).val)
        return norm + (3.0 * lam_L + 2.0 * mu_L) / (2.0 * mu_L) * (3.0 * mean.val) * alpha
    raise MaterialError(f"{kind.value} has no yield surface")


__all__: List[str] = [
    "MaterialError",
    "IncompressibleLimitError",
    "MaterialType",
    "MaterialParams",
    "MaterialModel",
    "PARAM_NAMES",
    "ACTIVE_PARAMS",
    "PARAM_UNITS",
    "SAND_E",
    "SAND_NU",
    "lame_coefficients",
    "drucker_prager_alpha",
    "kirchhoff_stress",
    "cauchy_stress",
    "return_map",
    "yield_function",
]
