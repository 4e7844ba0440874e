"""
Intra-group image registration.

All transforms map *target* voxel coordinates to *source* voxel coordinates
(backward warping):

    output(x) = source(L @ x + t + u(x))

Affine registration optimizes the 12 entries of a normalized-coordinate
affine map with Adam over an image pyramid. Deformable registration refines
a dense displacement field on the affinely resampled moving image with
normalized gradient steps, Gaussian field smoothing and a diffusion penalty.
Both keep the best transform seen at full resolution, starting from the
identity, so the returned loss never exceeds the unregistered loss.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import DegenerateInputError, RegistrationError, ShapeError
from .optim import Adam
from .volume import (
    Volume3,
    grid_coordinates,
    read_dfield,
    resize_array,
    sample_points,
    smooth_array,
    write_dfield,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Similarity = Literal["ncc", "ssd"]

_TINY = 1e-12


class RegConfig(BaseModel):
    """Similarity, pyramid and optimizer settings for both registration stages."""

    model_config = ConfigDict(extra="forbid")

    similarity: Similarity = "ncc"
    levels: Tuple[int, ...] = Field((4, 2, 1), description="Pyramid shrink factors, coarse to fine")
    affine_iterations: int = Field(100, ge=1)
    deformable_iterations: int = Field(150, ge=1)
    affine_lr: float = Field(0.01, gt=0)
    deformable_lr: float = Field(0.5, gt=0, description="Largest per-voxel update in voxels")
    diffusion_weight: float = Field(0.1, ge=0)
    field_sigma: float = Field(1.0, ge=0)
    tolerance: float = Field(1e-5, ge=0)
    tolerance_window: int = Field(10, ge=1)
    deformable: bool = True
    trace: bool = False

    @field_validator("levels")
    @classmethod
    def _levels(cls, v):
        if not v or any(f < 1 for f in v):
            raise ValueError("levels must be positive shrink factors")
        return v


@dataclass(frozen=True)
class AffineTransform:
    """3x4 matrix [L | t] mapping target voxel coordinates to source coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"affine matrix must be 3x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise RegistrationError("affine entries must be finite", stage="affine")
        det = float(np.linalg.det(m[:, :3]))
        if det <= 0:
            raise RegistrationError(
                "affine linear part must preserve orientation", stage="affine", det=det
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def translation(cls, offset: Sequence[float]) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.asarray(offset, dtype=np.float64).reshape(3, 1)]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 3]

    def apply(self, coords: np.ndarray) -> np.ndarray:
        """Map target coordinates of shape (3, N) to source coordinates."""
        return self.linear @ coords + self.offset[:, None]

    def to_list(self) -> List[float]:
        return [float(x) for x in self.matrix.ravel()]

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"matrix": self.to_list(), "convention": "target->source voxel coordinates"}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "AffineTransform":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        values = payload["matrix"]
        if len(values) != 12:
            raise ValueError(f"affine sidecar {path} must hold 12 numbers, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 4))


def field_energy(components: np.ndarray) -> float:
    """Mean over voxels of the summed squared forward differences of every component."""
    n_voxels = int(np.prod(components.shape[1:]))
    total = 0.0
    for axis in range(1, components.ndim):
        total += float(np.sum(np.diff(components, axis=axis) ** 2))
    return total / n_voxels


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement (ux, uy, uz) in voxel units on the target grid."""

    components: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        c = np.array(self.components, dtype=np.float32)
        if c.ndim != 4 or c.shape[0] != 3:
            raise ValueError(f"displacement field must have shape (3, nx, ny, nz), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("displacement field values must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @property
    def smoothness(self) -> float:
        """Mean squared forward-difference gradient of the field."""
        return field_energy(self.components.astype(np.float64))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(dims), dtype=np.float32))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.components.shape[1:])

    def mean_norm(self) -> float:
        return float(np.sqrt((self.components.astype(np.float64) ** 2).sum(axis=0)).mean())

    def save(self, path: PathLike) -> Path:
        metadata = {"smoothness": self.smoothness, "mean_norm": self.mean_norm()}
        return write_dfield(self.components, self.spacing, path, metadata)

    @classmethod
    def load(cls, path: PathLike) -> "DisplacementField":
        components, spacing = read_dfield(path)
        return cls(components, spacing)


@dataclass
class TraceEntry:
    stage: str
    level: int
    iteration: int
    loss: float
    best: float


def write_trace(entries: Sequence[TraceEntry], path: PathLike) -> Path:
    """Per-iteration registration losses as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([e.__dict__ for e in entries]).to_csv(path, index=False)
    return path


def similarity_and_gradient(
    fixed: np.ndarray, moving: np.ndarray, kind: Similarity = "ncc"
) -> Tuple[float, np.ndarray]:
    """
    Similarity loss and its gradient with respect to the moving values.

    SSD is the mean squared difference; NCC loss is 1 - correlation.

    Raises:
        ShapeError: If the arrays differ in shape.
        DegenerateInputError: For NCC when either input is constant.
    """
    if fixed.shape != moving.shape:
        raise ShapeError(f"similarity needs equal dims, got {fixed.shape} and {moving.shape}")
    f = np.asarray(fixed, dtype=np.float64)
    m = np.asarray(moving, dtype=np.float64)
    if kind == "ssd":
        diff = m - f
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    if kind != "ncc":
        raise ValueError(f"unknown similarity '{kind}'")
    fz = f - f.mean()
    mz = m - m.mean()
    sff = float(np.sum(fz * fz))
    smm = float(np.sum(mz * mz))
    if sff <= _TINY or smm <= _TINY:
        raise DegenerateInputError("NCC is undefined for a constant volume")
    sfm = float(np.sum(fz * mz))
    denom = np.sqrt(sff * smm)
    correlation = sfm / denom
    d_correlation = fz / denom - correlation * mz / smm
    return 1.0 - correlation, -d_correlation


def similarity(fixed: Volume3, moving_warped: Volume3, kind: Similarity = "ncc") -> float:
    """Similarity loss between two volumes on the same grid (0 for identical inputs)."""
    loss, _ = similarity_and_gradient(fixed.data, moving_warped.data, kind)
    return loss


def level_dims(dims: Sequence[int], factor: int) -> Tuple[int, ...]:
    return tuple(max(2, (n - 1) // factor + 1) if n > 1 else 1 for n in dims)


def pyramid_level(data: np.ndarray, factor: int) -> np.ndarray:
    """Image at one pyramid level: Gaussian pre-smoothing then aligned-corner resize."""
    if factor == 1:
        return np.asarray(data, dtype=np.float64)
    smoothed = smooth_array(data, factor / 2.0)
    return resize_array(smoothed, level_dims(data.shape, factor))


def _normalized_grid(dims: Sequence[int]) -> np.ndarray:
    """Grid coordinates mapped to [-1, 1] with aligned corners."""
    coords = grid_coordinates(dims)
    scale = np.array([2.0 / (n - 1) if n > 1 else 0.0 for n in dims])[:, None]
    shift = np.array([1.0 if n > 1 else 0.0 for n in dims])[:, None]
    return coords * scale - shift


def _half_extent(dims: Sequence[int]) -> np.ndarray:
    return np.array([(n - 1) / 2.0 for n in dims])


def _theta_to_voxel(
    theta: np.ndarray, target_dims: Sequence[int], source_dims: Sequence[int]
) -> AffineTransform:
    """Convert a normalized [A | b] to voxel units: q = S (A (D p - 1) + b + 1)."""
    A = theta[:9].reshape(3, 3)
    b = theta[9:]
    S = np.diag(_half_extent(source_dims))
    D = np.diag([2.0 / (n - 1) if n > 1 else 0.0 for n in target_dims])
    ones_t = np.array([1.0 if n > 1 else 0.0 for n in target_dims])
    linear = S @ A @ D
    offset = S @ (b - A @ ones_t + 1.0)
    return AffineTransform(np.hstack([linear, offset[:, None]]))


def _identity_theta() -> np.ndarray:
    return np.concatenate([np.eye(3).ravel(), np.zeros(3)])


def _affine_loss(
    theta: np.ndarray,
    fixed: np.ndarray,
    moving: np.ndarray,
    grid: np.ndarray,
    kind: Similarity,
    with_gradient: bool = True,
) -> Tuple[float, Optional[np.ndarray]]:
    A = theta[:9].reshape(3, 3)
    b = theta[9:]
    half = _half_extent(moving.shape)[:, None]
    source = (A @ grid + b[:, None] + 1.0) * half
    if not with_gradient:
        values = sample_points(moving, source)
        loss, _ = similarity_and_gradient(fixed, values.reshape(fixed.shape), kind)
        return loss, None
    values, d_coords = sample_points(moving, source, with_gradient=True)
    loss, d_values = similarity_and_gradient(fixed, values.reshape(fixed.shape), kind)
    g_source = d_coords * d_values.reshape(1, -1) * half
    g_theta = np.concatenate([(g_source @ grid.T).ravel(), g_source.sum(axis=1)])
    return loss, g_theta


def _converged(history: List[float], config: RegConfig) -> bool:
    window = config.tolerance_window
    if len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    return abs(old - new) <= config.tolerance * max(abs(old), _TINY)


def affine_register(
    fixed: Volume3,
    moving: Volume3,
    config: Optional[RegConfig] = None,
    trace: Optional[List[TraceEntry]] = None,
) -> AffineTransform:
    """
    Affine map from ``fixed`` (target) coordinates into ``moving`` (source).

    Each pyramid level runs Adam on the 12 normalized parameters with chain-rule
    gradients through trilinear sampling; the step size halves with every finer
    level. The returned transform has the lowest full-resolution loss found,
    the identity included.

    Raises:
        RegistrationError: On a degenerate similarity or non-finite loss.
    """
    config = config or RegConfig()
    f_full = np.asarray(fixed.data, dtype=np.float64)
    m_full = np.asarray(moving.data, dtype=np.float64)
    full_grid = _normalized_grid(f_full.shape)

    def full_loss(theta: np.ndarray) -> float:
        return _affine_loss(theta, f_full, m_full, full_grid, config.similarity, False)[0]

    best_theta = _identity_theta()
    try:
        best_loss = full_loss(best_theta)
    except DegenerateInputError as e:
        raise RegistrationError(str(e), stage="affine", level=0, iteration=0) from e

    for level, factor in enumerate(config.levels):
        f_level = pyramid_level(f_full, factor)
        m_level = pyramid_level(m_full, factor)
        grid = _normalized_grid(f_level.shape)
        theta = best_theta.copy()
        params = {"theta": theta}
        optimizer = Adam(lr=config.affine_lr * factor / config.levels[0])
        level_best_theta, level_best = theta.copy(), np.inf
        history: List[float] = []
        for iteration in range(config.affine_iterations):
            try:
                loss, grad = _affine_loss(theta, f_level, m_level, grid, config.similarity)
            except DegenerateInputError as e:
                raise RegistrationError(
                    str(e), stage="affine", level=level, iteration=iteration
                ) from e
            if not np.isfinite(loss):
                raise RegistrationError(
                    "non-finite loss", stage="affine", level=level, iteration=iteration
                )
            if loss < level_best:
                level_best, level_best_theta = loss, theta.copy()
            history.append(level_best)
            if trace is not None:
                trace.append(TraceEntry("affine", level, iteration, loss, level_best))
            if _converged(history, config):
                break
            optimizer.step(params, {"theta": grad})

        candidate = full_loss(level_best_theta)
        logger.debug(
            "affine level %d (x%d): level loss %.6f, full loss %.6f",
            level,
            factor,
            level_best,
            candidate,
        )
        if candidate < best_loss:
            best_loss, best_theta = candidate, level_best_theta

    return _theta_to_voxel(best_theta, f_full.shape, m_full.shape)


def _diffusion_gradient(u: np.ndarray) -> np.ndarray:
    """Gradient of the summed squared forward differences of ``u`` (shape (3, *dims))."""
    grad = np.zeros_like(u)
    for axis in range(1, u.ndim):
        d = np.diff(u, axis=axis)
        lead = [slice(None)] * u.ndim
        trail = [slice(None)] * u.ndim
        lead[axis] = slice(None, -1)
        trail[axis] = slice(1, None)
        grad[tuple(lead)] -= 2.0 * d
        grad[tuple(trail)] += 2.0 * d
    return grad


def _deformable_loss(
    u: np.ndarray,
    fixed: np.ndarray,
    moving: np.ndarray,
    grid: np.ndarray,
    config: RegConfig,
    with_gradient: bool = True,
) -> Tuple[float, Optional[np.ndarray]]:
    n_voxels = fixed.size
    coords = grid + u.reshape(3, -1)
    penalty = config.diffusion_weight * field_energy(u)
    if not with_gradient:
        values = sample_points(moving, coords)
        loss, _ = similarity_and_gradient(fixed, values.reshape(fixed.shape), config.similarity)
        return loss + penalty, None
    values, d_coords = sample_points(moving, coords, with_gradient=True)
    loss, d_values = similarity_and_gradient(fixed, values.reshape(fixed.shape), config.similarity)
    grad = (d_coords * d_values.reshape(1, -1)).reshape(u.shape)
    grad += config.diffusion_weight * _diffusion_gradient(u) / n_voxels
    return loss + penalty, grad


def upsample_field(u: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Resize each component and rescale it by the per-axis grid ratio."""
    out = np.empty((3,) + tuple(dims))
    for c in range(3):
        n_old, n_new = u.shape[c + 1], dims[c]
        ratio = (n_new - 1) / (n_old - 1) if n_old > 1 and n_new > 1 else 1.0
        out[c] = resize_array(u[c], dims) * ratio
    return out


def deformable_register(
    fixed: Volume3,
    moving_affine_warped: Volume3,
    config: Optional[RegConfig] = None,
    trace: Optional[List[TraceEntry]] = None,
) -> DisplacementField:
    """
    Dense displacement field aligning an affinely pre-aligned image to ``fixed``.

    Per level, the loss is similarity + diffusion_weight * mean |grad u|^2. Each
    step moves the voxel with the largest gradient by ``deformable_lr`` voxels
    (halved whenever the loss gets worse), after which the field is smoothed
    with a Gaussian of ``field_sigma``. Fields are upsampled between levels.

    Raises:
        ShapeError: If the images are on different grids.
        RegistrationError: On a degenerate similarity or non-finite loss.
    """
    config = config or RegConfig()
    if fixed.dims != moving_affine_warped.dims:
        raise ShapeError(
            "deformable registration needs equal dims, "
            f"got {fixed.dims} and {moving_affine_warped.dims}"
        )
    f_full = np.asarray(fixed.data, dtype=np.float64)
    m_full = np.asarray(moving_affine_warped.data, dtype=np.float64)
    full_grid = grid_coordinates(f_full.shape)

    def full_loss(u: np.ndarray) -> float:
        return _deformable_loss(u, f_full, m_full, full_grid, config, False)[0]

    best_u = np.zeros((3,) + f_full.shape)
    try:
        best_loss = full_loss(best_u)
    except DegenerateInputError as e:
        raise RegistrationError(str(e), stage="deformable", level=0, iteration=0) from e

    u: Optional[np.ndarray] = None
    for level, factor in enumerate(config.levels):
        f_level = pyramid_level(f_full, factor)
        m_level = pyramid_level(m_full, factor)
        grid = grid_coordinates(f_level.shape)
        u = np.zeros((3,) + f_level.shape) if u is None else upsample_field(u, f_level.shape)
        step = config.deformable_lr
        level_best_u, level_best, level_best_grad = u.copy(), np.inf, None
        history: List[float] = []
        for iteration in range(config.deformable_iterations):
            try:
                loss, grad = _deformable_loss(u, f_level, m_level, grid, config)
            except DegenerateInputError as e:
                raise RegistrationError(
                    str(e), stage="deformable", level=level, iteration=iteration
                ) from e
            if not np.isfinite(loss):
                raise RegistrationError(
                    "non-finite loss", stage="deformable", level=level, iteration=iteration
                )
            if loss < level_best:
                level_best, level_best_u, level_best_grad = loss, u.copy(), grad
            else:
                # backtrack to the best field with a shorter step
                step *= 0.5
                u, grad = level_best_u.copy(), level_best_grad
            history.append(level_best)
            if trace is not None:
                trace.append(TraceEntry("deformable", level, iteration, loss, level_best))
            peak = float(np.sqrt((grad**2).sum(axis=0)).max())
            if peak < _TINY or step < 1e-3 or _converged(history, config):
                break
            u = u - (step / peak) * grad
            if config.field_sigma > 0:
                u = np.stack([smooth_array(u[c], config.field_sigma) for c in range(3)])

        u = level_best_u
        candidate_u = u if f_level.shape == f_full.shape else upsample_field(u, f_full.shape)
        candidate = full_loss(candidate_u)
        logger.debug(
            "deformable level %d (x%d): level loss %.6f, full loss %.6f",
            level,
            factor,
            level_best,
            candidate,
        )
        if candidate < best_loss:
            best_loss, best_u = candidate, candidate_u

    result = DisplacementField(best_u.astype(np.float32), fixed.spacing)
    logger.debug(
        "deformable field: mean |u| %.4f, smoothness %.6f", result.mean_norm(), result.smoothness
    )
    return result


def to_source_field(affine: AffineTransform, field: DisplacementField) -> DisplacementField:
    """
    Express a field estimated on the affinely resampled image in source space.

    ``m(L (x + u) + t) = m(L x + t + L u)``, so the source-space field is ``L u``.
    """
    components = np.tensordot(affine.linear, field.components.astype(np.float64), axes=(1, 0))
    return DisplacementField(components.astype(np.float32), field.spacing)


def warp_array(
    data: np.ndarray,
    affine: Optional[AffineTransform] = None,
    field: Optional[DisplacementField] = None,
    dims: Optional[Sequence[int]] = None,
    interpolation: str = "trilinear",
) -> np.ndarray:
    """Backward-warp a 3D array onto a target grid (defaults: the field's or the source's dims)."""
    if dims is None:
        dims = field.dims if field is not None else data.shape
    dims = tuple(int(n) for n in dims)
    if field is not None and field.dims != dims:
        raise ShapeError(f"field dims {field.dims} do not match target dims {dims}")
    coords = grid_coordinates(dims)
    source = (affine or AffineTransform.identity()).apply(coords)
    if field is not None:
        source = source + field.components.reshape(3, -1)
    if interpolation == "nearest":
        source = np.rint(source)
    elif interpolation != "trilinear":
        raise ValueError(f"unknown interpolation '{interpolation}'")
    return sample_points(data, source).reshape(dims)


def warp(
    v: Volume3,
    affine: Optional[AffineTransform] = None,
    field: Optional[DisplacementField] = None,
    interpolation: str = "trilinear",
    dims: Optional[Sequence[int]] = None,
) -> Volume3:
    """
    ``output(x) = v(L x + t + u(x))``; samples outside ``v`` read 0.

    The same (affine, field) pair is applied to images and CAM maps.
    """
    return v.with_data(warp_array(v.data, affine, field, dims, interpolation))


@dataclass
class PairRegistration:
    affine: AffineTransform
    field: DisplacementField
    trace: List[TraceEntry]


def register_pair(
    fixed: Volume3, moving: Volume3, config: Optional[RegConfig] = None
) -> PairRegistration:
    """Affine then deformable registration; the field is returned in source space."""
    config = config or RegConfig()
    trace: List[TraceEntry] = []
    affine = affine_register(fixed, moving, config, trace)
    if not config.deformable:
        return PairRegistration(affine, DisplacementField.zeros(fixed.dims), trace)
    aligned = warp(moving, affine, dims=fixed.dims)
    local = deformable_register(fixed, aligned, config, trace)
    return PairRegistration(affine, to_source_field(affine, local), trace)
