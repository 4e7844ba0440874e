"""
Grad-CAM importance maps for the age regressor.

The third residual stage's activation A is retained on the tape, the scalar
prediction is back-propagated with unit upstream gradient, and

    alpha_c = mean(d y / d A_c),   M = relu(sum_c alpha_c * A_c)

is upsampled (linear, aligned corners) to the input grid and divided by its
maximum.
"""

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np

from .agenet import CAM_LAYER, AgeNet, as_input, load_image
from .autodiff import Tape, backward
from .errors import AgeAtlasError, NumericalError, ShapeError
from .manifest import Manifest, SubjectRecord
from .volume import Volume3, resize_array, write_vol

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Normalization = Literal["max", "none"]


@dataclass(frozen=True)
class CamMap:
    """An importance volume on a subject's image grid, with provenance."""

    volume: Volume3
    subject_id: Optional[int] = None
    checkpoint_id: Optional[str] = None
    layer: str = CAM_LAYER
    normalize: str = "max"

    def __post_init__(self):
        if float(self.volume.data.min()) < 0:
            raise ValueError("CAM values must be non-negative")
        if self.normalize == "max":
            peak = float(self.volume.data.max())
            if peak not in (0.0, 1.0):
                raise ValueError(f"max-normalized CAM must peak at 1 or be all zero, got {peak}")

    def provenance(self) -> Dict[str, object]:
        return {
            "subject_id": self.subject_id,
            "checkpoint_id": self.checkpoint_id,
            "layer": self.layer,
            "normalize": self.normalize,
        }


def weighted_map(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """relu of the channel sum of ``activation`` weighted by spatially averaged ``gradient``."""
    if activation.shape != gradient.shape or activation.ndim < 2:
        raise ShapeError(f"activation {activation.shape} and gradient {gradient.shape} differ")
    alpha = gradient.reshape(gradient.shape[0], -1).mean(axis=1)
    return np.maximum(np.tensordot(alpha, activation, axes=(0, 0)), 0.0)


def normalize_map(raw: np.ndarray, normalize: Normalization = "max") -> np.ndarray:
    if normalize == "none":
        return raw
    if normalize != "max":
        raise ValueError(f"unknown CAM normalization '{normalize}'")
    peak = raw.max()
    if peak > 0:
        return raw / peak
    return np.zeros_like(raw)


def activation_and_gradient(net: AgeNet, image) -> Tuple[np.ndarray, np.ndarray]:
    """Third-stage activation and d(prediction)/d(activation) for one input."""
    with Tape():
        prediction, activation = net.apply(as_input(image))
    grads = backward(prediction, retain=[activation.node_id], set_leaf_grads=False)
    gradient = grads[activation.node_id]
    if not np.all(np.isfinite(gradient)):
        raise NumericalError("non-finite Grad-CAM gradient", layer=CAM_LAYER)
    return activation.data.astype(np.float64), gradient.astype(np.float64)


def grad_cam(net: AgeNet, image, normalize: Normalization = "max") -> np.ndarray:
    """
    Rank-generic Grad-CAM on the net's input grid.

    Args:
        net: 2D or 3D network.
        image: Volume3 (3D, one channel) or a channel-first array.
        normalize: ``"max"`` divides by the maximum after upsampling,
            ``"none"`` keeps raw magnitudes.
    """
    activation, gradient = activation_and_gradient(net, image)
    raw = weighted_map(activation, gradient)
    upsampled = np.maximum(resize_array(raw, net.config.input_dims), 0.0)
    return normalize_map(upsampled, normalize)


def extract_cam(
    net: AgeNet,
    image: Volume3,
    subject_id: Optional[int] = None,
    checkpoint_id: Optional[str] = None,
    normalize: Normalization = "max",
) -> CamMap:
    """
    Grad-CAM importance volume for one subject.

    Raises:
        ShapeError: If ``image`` dims differ from the network input dims.
        NumericalError: On non-finite gradients.
    """
    if image.dims != tuple(net.config.input_dims):
        raise ShapeError(
            f"image dims {image.dims} do not match network input {net.config.input_dims}"
        )
    cam = grad_cam(net, image, normalize)
    volume = image.with_data(cam.astype(np.float32))
    return CamMap(volume, subject_id, checkpoint_id, CAM_LAYER, normalize)


def checkpoint_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cam_filename(subject_id: int) -> str:
    return f"cam_{subject_id:05d}.vol"


def extract_cohort(
    net: AgeNet,
    manifest: Manifest,
    out_dir: PathLike,
    checkpoint_id: Optional[str] = None,
    normalize: Normalization = "max",
    jobs: int = 1,
) -> Tuple[Manifest, Dict[int, str]]:
    """
    Write one CAM volume per record and point each record's ``cam_path`` at it.

    A subject that fails is logged and skipped; the rest of the batch still runs.

    Returns:
        The updated manifest and a map of failed subject id to error message.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures: Dict[int, str] = {}

    def run(record: SubjectRecord) -> SubjectRecord:
        try:
            image = load_image(manifest, record, "cam")
            cam = extract_cam(net, image, record.id, checkpoint_id, normalize)
            path = write_vol(cam.volume, out_dir / cam_filename(record.id))
        except (AgeAtlasError, OSError, ValueError, ArithmeticError) as e:
            logger.error("CAM extraction failed for subject %d: %s", record.id, e)
            failures[record.id] = str(e)
            return record
        relative = Path(os.path.relpath(path, manifest.base_dir)).as_posix()
        return record.updated(cam_path=relative, cam_provenance=cam.provenance())

    logger.info("Extracting %d CAMs into %s", len(manifest), out_dir)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        updated = list(pool.map(run, manifest))
    if failures:
        logger.warning("%d of %d CAM extractions failed", len(failures), len(manifest))
    return manifest.merge(updated), failures
