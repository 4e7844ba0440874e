"""
Residual age-regression network, its training loop and checkpoint IO.

The network is rank-generic: with 3D input dims it is the volumetric age
model, with 2D input dims and two input channels it is the projection
baseline network.

    stem conv (1 -> c0) -> 3 residual stages (stride 2) -> gap -> fc(hidden) -> relu -> fc(1)

Each stage is conv(s=2) - relu - conv(s=1) added to a strided 1x1 projection
of its input, followed by relu. The third stage's output is the Grad-CAM
target layer.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    conv,
    gap,
    linear,
    mae_loss,
    projection1x1,
    relu,
    stack,
)
from .errors import CheckpointError, MissingArtifactError, NumericalError, ShapeError
from .manifest import Manifest, SubjectRecord
from .optim import Adam, GradientAccumulator, PlateauScheduler
from .volume import Volume3, read_vol

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CKPT_MAGIC = b"AGEN0001"
CKPT_VERSION = 1
CAM_LAYER = "stage3"

Sample = Tuple[np.ndarray, float]


class NetConfig(BaseModel):
    """Architecture of :class:`AgeNet`."""

    model_config = ConfigDict(extra="forbid")

    channels: Tuple[int, int, int] = (8, 16, 32)
    hidden: int = Field(256, ge=1, description="Width of the first fully connected layer")
    input_dims: Tuple[int, ...] = (32, 64, 24)
    in_channels: int = Field(1, ge=1)
    seed: int = 0

    @field_validator("channels")
    @classmethod
    def _increasing(cls, v):
        if any(c < 1 for c in v):
            raise ValueError("channels must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("channels must be increasing")
        return v

    @field_validator("input_dims")
    @classmethod
    def _dims(cls, v):
        if len(v) not in (2, 3) or any(n < 1 for n in v):
            raise ValueError("input_dims must be 2 or 3 positive sizes")
        return v


class TrainConfig(BaseModel):
    """Optimizer and schedule for :func:`train`."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(1, ge=1)
    accumulation: int = Field(32, ge=1, description="Mini-batches per averaged optimizer step")
    plateau_patience: int = Field(3, ge=1)
    plateau_factor: float = Field(0.1, gt=0, lt=1)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _betas(self):
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_mae: float
    lr: float = Field(..., description="Learning rate after the plateau check of this epoch")


class AgeNet:
    """
    Parameters and forward pass of the age regressor.

    Args:
        config: Architecture; the default builds the 3D model.
        mean_age: Initial fc2 bias (the training-set mean age).
        init: ``"he"`` for He-normal weights, ``"zeros"`` for an all-zero net.
    """

    def __init__(self, config: Optional[NetConfig] = None, mean_age: float = 0.0, init: str = "he"):
        self.config = config or NetConfig()
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(self.config.seed)
        rank = self.rank
        kernel = (3,) * rank
        c0, c1, c2 = self.config.channels

        def weight(name: str, shape: Tuple[int, ...], fan_in: int) -> None:
            if init == "he":
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif init == "zeros":
                data = np.zeros(shape)
            else:
                raise ValueError(f"unknown init '{init}'")
            self.params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)

        def bias(name: str, size: int, value: float = 0.0) -> None:
            data = np.full(size, value, dtype=np.float32)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

        k = 3**rank
        weight("stem.weight", (c0, self.config.in_channels) + kernel, self.config.in_channels * k)
        bias("stem.bias", c0)
        for stage, (c_in, c_out) in enumerate([(c0, c0), (c0, c1), (c1, c2)], start=1):
            prefix = f"stage{stage}"
            weight(f"{prefix}.conv1.weight", (c_out, c_in) + kernel, c_in * k)
            bias(f"{prefix}.conv1.bias", c_out)
            weight(f"{prefix}.conv2.weight", (c_out, c_out) + kernel, c_out * k)
            bias(f"{prefix}.conv2.bias", c_out)
            weight(f"{prefix}.skip.weight", (c_out, c_in), c_in)
        weight("fc1.weight", (self.config.hidden, c2), c2)
        bias("fc1.bias", self.config.hidden)
        weight("fc2.weight", (1, self.config.hidden), self.config.hidden)
        bias("fc2.bias", 1, mean_age)

    @property
    def rank(self) -> int:
        return len(self.config.input_dims)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (self.config.in_channels,) + tuple(self.config.input_dims)

    @property
    def cam_shape(self) -> Tuple[int, ...]:
        """Shape of the third-stage activation for this net's input dims."""
        spatial = tuple(self.config.input_dims)
        for _ in range(3):
            spatial = tuple((n - 1) // 2 + 1 for n in spatial)
        return (self.config.channels[2],) + spatial

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.params.items()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def copy(self) -> "AgeNet":
        clone = AgeNet.__new__(AgeNet)
        clone.config = self.config.model_copy()
        clone.params = {
            name: Tensor(t.data.copy(), requires_grad=True, name=name)
            for name, t in self.params.items()
        }
        return clone

    def _stage(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = relu(conv(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], stride=2))
        h = conv(h, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], stride=1)
        skip = projection1x1(x, p[f"{prefix}.skip.weight"], stride=2)
        return relu(add(h, skip))

    def apply(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Forward pass on one input of shape (C, *input_dims).

        Returns:
            The prediction tensor of shape (1,) and the third-stage activation.
        """
        if x.shape != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape} does not match network input {self.input_shape}"
            )
        p = self.params
        h = relu(conv(x, p["stem.weight"], p["stem.bias"], stride=1))
        h = self._stage(h, "stage1")
        h = self._stage(h, "stage2")
        activation = self._stage(h, "stage3")
        h = relu(linear(gap(activation), p["fc1.weight"], p["fc1.bias"]))
        return linear(h, p["fc2.weight"], p["fc2.bias"]), activation


def as_input(image: Union[Volume3, np.ndarray]) -> Tensor:
    """Network input tensor for a volume (one channel) or a channel-first array."""
    if isinstance(image, Volume3):
        return Tensor(image.data[np.newaxis])
    return Tensor(np.asarray(image, dtype=np.float32))


def forward(net: AgeNet, image: Union[Volume3, np.ndarray]) -> Tuple[float, Tensor]:
    """
    Predict the age of one subject.

    Returns:
        (prediction in years, third-stage activation tensor)

    Raises:
        ShapeError: If the image dims differ from the network input dims.
    """
    y, activation = net.apply(as_input(image))
    return y.item(), activation


def batch_gradients(
    net: AgeNet, images: Sequence[np.ndarray], ages: Sequence[float]
) -> Tuple[float, Dict[str, np.ndarray]]:
    """MAE loss of one mini-batch and its gradient for every parameter."""
    with Tape():
        preds = [net.apply(as_input(img))[0] for img in images]
        loss = mae_loss(stack(preds), np.asarray(ages, dtype=np.float64))
    if not np.isfinite(loss.item()):
        raise NumericalError("non-finite training loss", batch_ages=list(ages))
    grads = backward(loss, set_leaf_grads=False)
    return loss.item(), {
        name: grads[t] if t in grads else np.zeros_like(t.data) for name, t in net.params.items()
    }


def mean_absolute_error(net: AgeNet, samples: Sequence[Sample], jobs: int = 1) -> float:
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        preds = list(pool.map(lambda s: forward(net, s[0])[0], samples))
    return float(np.mean([abs(p - age) for p, (_, age) in zip(preds, samples)]))


def fit(
    net: AgeNet,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    epochs: Optional[int] = None,
    jobs: int = 1,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> List[EpochRecord]:
    """
    Train ``net`` in place on in-memory samples.

    Mini-batches of ``batch_size`` samples are visited in a seeded shuffle per
    epoch. Their gradients are summed and every ``accumulation`` mini-batches
    the mean is applied as one Adam step; a shorter window left at the end of
    an epoch is flushed as one step over its own count. The plateau scheduler
    watches validation MAE.

    Args:
        net: Network to update.
        train_samples: (input array of the net's input shape, age) pairs.
        val_samples: Validation pairs used for the plateau schedule.
        config: Hyperparameters; defaults to :class:`TrainConfig`.
        epochs: Overrides ``config.epochs``.
        jobs: Mini-batches of one window computed in parallel; the reduction
            order is fixed so results do not depend on it.
        on_epoch: Called with each epoch's record.

    Returns:
        One :class:`EpochRecord` per epoch.

    Raises:
        ValueError: If either split is empty.
        NumericalError: On a non-finite loss or gradient.
    """
    config = config or TrainConfig()
    epochs = epochs or config.epochs
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and val splits")

    optimizer = Adam(lr=config.lr, betas=config.betas, eps=config.eps)
    scheduler = PlateauScheduler(optimizer, config.plateau_factor, config.plateau_patience)
    accumulator = GradientAccumulator(config.accumulation)
    params = net.arrays()
    history: List[EpochRecord] = []

    def run_batch(indices: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        batch = [train_samples[i] for i in indices]
        return batch_gradients(net, [s[0] for s in batch], [s[1] for s in batch])

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for epoch in range(1, epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
            batches = [
                order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)
            ]
            losses: List[float] = []
            for start in range(0, len(batches), config.accumulation):
                window = batches[start : start + config.accumulation]
                for loss, grads in pool.map(run_batch, window):
                    losses.append(loss)
                    accumulator.add(grads)
                optimizer.step(params, accumulator.flush())

            val_mae = mean_absolute_error(net, val_samples, jobs)
            scheduler.step(val_mae)
            record = EpochRecord(
                epoch=epoch, train_loss=float(np.mean(losses)), val_mae=val_mae, lr=optimizer.lr
            )
            history.append(record)
            logger.info(
                "Epoch %d/%d: train MAE %.3f, val MAE %.3f, lr %.1e",
                epoch, epochs, record.train_loss, val_mae, optimizer.lr,
            )
            if on_epoch is not None:
                on_epoch(record)
    return history


def load_image(manifest: Manifest, record: SubjectRecord, stage: str = "train") -> Volume3:
    path = manifest.resolve(record.image_path)
    if not path.exists():
        raise MissingArtifactError(
            stage, f"image of subject {record.id} ({path})", "run the phantom stage"
        )
    return read_vol(path)


def load_samples(
    manifest: Manifest, split: str, stage: str = "train", jobs: int = 1
) -> List[Sample]:
    records = [r for r in manifest if r.split == split]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        images = list(pool.map(lambda r: load_image(manifest, r, stage), records))
    return [(img.data[np.newaxis], float(r.age)) for img, r in zip(images, records)]


def train(
    net: AgeNet,
    manifest: Manifest,
    config: Optional[TrainConfig] = None,
    epochs: Optional[int] = None,
    jobs: int = 1,
) -> Tuple[AgeNet, List[EpochRecord]]:
    """Train on the manifest's ``train`` split, scheduling on its ``val`` split."""
    train_samples = load_samples(manifest, "train", jobs=jobs)
    val_samples = load_samples(manifest, "val", jobs=jobs)
    logger.info("Training on %d subjects, validating on %d", len(train_samples), len(val_samples))
    history = fit(net, train_samples, val_samples, config, epochs, jobs)
    return net, history


def predict_manifest(
    net: AgeNet,
    manifest: Manifest,
    jobs: int = 1,
    loader: Optional[Callable[[Manifest, SubjectRecord], np.ndarray]] = None,
    field: str = "predicted_age",
) -> Manifest:
    """
    Predict every record of ``manifest`` and store the raw prediction in ``field``.

    Predictions are independent of record order and of ``jobs``.

    Raises:
        MissingArtifactError: If an input volume is absent.
    """
    if loader is None:
        def loader(m: Manifest, r: SubjectRecord) -> np.ndarray:
            return load_image(m, r, "predict").data[np.newaxis]

    def predict_one(record: SubjectRecord) -> SubjectRecord:
        prediction, _ = forward(net, loader(manifest, record))
        return record.updated(**{field: prediction})

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        updated = list(pool.map(predict_one, manifest))
    return manifest.with_records(updated)


def save_ckpt(net: AgeNet, path: PathLike) -> Path:
    """
    Write ``AGEN0001``, a little-endian u32 header length, a JSON header
    (config and parameter layout) and the float32 parameter blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "config": net.config.model_dump(mode="json"),
        "layout": [[name, list(shape)] for name, shape in net.layout()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(t.data.astype("<f4").tobytes() for t in net.params.values())
    path.write_bytes(CKPT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob)
    return path


def load_ckpt(path: PathLike, expected: Optional[NetConfig] = None) -> AgeNet:
    """
    Read a checkpoint written by :func:`save_ckpt`.

    Raises:
        CheckpointError: On bad magic, unknown version, a config other than
            ``expected`` or a layout/blob that does not match the config.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError("checkpoint", str(path), "run the train stage")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    try:
        (length,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + length].decode("utf-8"))
        config = NetConfig.model_validate(header["config"])
    except (struct.error, ValueError, KeyError) as e:
        raise CheckpointError(f"bad checkpoint header in {path}: {e}") from e
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if expected is not None and config != expected:
        raise CheckpointError("checkpoint was written for a different network config")

    net = AgeNet(config, init="zeros")
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    if layout != net.layout():
        raise CheckpointError("checkpoint parameter layout does not match its config")
    blob = np.frombuffer(raw[12 + length :], dtype="<f4")
    if blob.size != net.parameter_count():
        raise CheckpointError(
            f"checkpoint holds {blob.size} values, network needs {net.parameter_count()}"
        )
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        net.params[name].data = blob[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    return net
