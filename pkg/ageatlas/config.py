"""
Run configuration.

Values come from, in increasing precedence: built-in defaults, a JSON file
(``--config``), dotted overrides (``--set train.epochs=5``) and the
``AGEATLAS_OUTPUT_ROOT`` environment variable.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agenet import NetConfig, TrainConfig
from .analysis import AnalysisConfig
from .atlas import AtlasConfig
from .baseline25d import Baseline25DConfig
from .errors import ConfigError
from .phantom import DESK_COHORT, FULL_COHORT, PhantomParams
from .registration import RegConfig

PathLike = Union[str, Path]

OUTPUT_ROOT_ENV = "AGEATLAS_OUTPUT_ROOT"


class CohortConfig(BaseModel):
    """Split sizes; each must be divisible by the 6 sex x BMI cells."""

    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(DESK_COHORT[0], ge=0)
    n_val: int = Field(DESK_COHORT[1], ge=0)
    n_test: int = Field(DESK_COHORT[2], ge=0)
    full_scale: bool = Field(False, description="Use the 1536/384/1200 split sizes")

    @model_validator(mode="after")
    def _balanced(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) % 6:
                raise ValueError(f"{name} must be divisible by 6 (sex x BMI cells)")
        return self

    @property
    def sizes(self) -> Tuple[int, int, int]:
        if self.full_scale:
            return FULL_COHORT
        return (self.n_train, self.n_val, self.n_test)


class GradCamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    normalize: Literal["max", "none"] = "max"


class RunConfig(BaseModel):
    """Every setting of a pipeline run."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    phantom: PhantomParams = Field(default_factory=PhantomParams)
    cohort: CohortConfig = Field(default_factory=CohortConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    baseline25d: Baseline25DConfig = Field(default_factory=Baseline25DConfig)
    gradcam: GradCamConfig = Field(default_factory=GradCamConfig)
    registration: RegConfig = Field(default_factory=RegConfig)
    atlas: AtlasConfig = Field(default_factory=AtlasConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output_root: str = "runs/default"

    @model_validator(mode="after")
    def _consistent_grid(self):
        if tuple(self.net.input_dims) != tuple(self.phantom.dims):
            raise ValueError(
                f"net.input_dims {tuple(self.net.input_dims)} must equal "
                f"phantom.dims {tuple(self.phantom.dims)}"
            )
        return self

    def seeded(self) -> "RunConfig":
        """Copy whose section seeds all derive from the run seed."""
        return self.model_copy(
            update={
                "phantom": self.phantom.model_copy(update={"seed": self.seed}),
                "net": self.net.model_copy(update={"seed": self.seed}),
                "train": self.train.model_copy(update={"seed": self.seed}),
                "baseline25d": self.baseline25d.model_copy(update={"seed": self.seed + 1}),
            }
        )


def parse_override(text: str) -> Tuple[Tuple[str, ...], Any]:
    """``a.b=value`` -> (("a", "b"), value); the value is JSON if it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key=value")
    key, raw = text.split("=", 1)
    path = tuple(part for part in key.strip().split(".") if part)
    if not path:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def _set_path(data: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = data
    for part in path[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[path[-1]] = value


def _format_errors(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
        for err in error.errors()
    )


def load_config(
    path: Optional[PathLike] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Build a validated :class:`RunConfig`.

    Raises:
        ConfigError: For a missing/unreadable file, malformed overrides, unknown
            keys or invalid values (the message names each offending field).
    """
    environ = os.environ if environ is None else environ
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for text in overrides:
        key, value = parse_override(text)
        _set_path(data, key, value)
    if environ.get(OUTPUT_ROOT_ENV):
        data["output_root"] = environ[OUTPUT_ROOT_ENV]
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def digest(*parts: Union[BaseModel, Mapping, str, bytes]) -> str:
    """Stable sha256 over models, mappings, strings and bytes."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, BaseModel):
            part = part.model_dump_json()
        elif isinstance(part, Mapping):
            part = json.dumps(part, sort_keys=True, default=str)
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(part)
        h.update(b"\x00")
    return h.hexdigest()
