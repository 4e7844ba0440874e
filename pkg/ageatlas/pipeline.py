"""
Pipeline stages and their receipts.

Artifacts live under a fixed layout::

    <root>/cohort       phantom volumes, ground-truth masks, manifest.jsonl
    <root>/checkpoints  network checkpoints, training histories, bias fits
    <root>/cams         per-subject Grad-CAM volumes
    <root>/transforms   per-group affine transforms and displacement fields
    <root>/atlases      group atlases and their index
    <root>/reports      tables, CSV exports and figures

Every stage writes ``<root>/receipts/<stage>/stage.json`` holding the digest
of its inputs (the output digests of its upstream receipts), the digest of
the config sections it reads, timings and the digest of what it wrote. A
stage whose receipt still matches is skipped unless forced.
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from . import plots
from .agenet import AgeNet, EpochRecord, load_ckpt, predict_manifest, save_ckpt, train
from .analysis import (
    correct_records,
    fit_bias,
    fit_bias_records,
    localization_row,
    metrics,
    predictions_frame,
    scatter_export,
    top_gap_examples,
)
from .atlas import (
    AGE_BANDS,
    GAP_BANDS,
    GroupKey,
    ImportanceAtlas,
    aggregate,
    register_group,
    render_atlas_report,
    stratify,
)
from .baseline25d import predict25d, project_cohort, train25d
from .config import RunConfig, digest
from .errors import MissingArtifactError, RegistrationError, SubjectFailureError
from .gradcam import checkpoint_digest, extract_cohort
from .manifest import Manifest, SubjectRecord
from .phantom import generate_cohort, subject_ground_truth
from .registration import AffineTransform, DisplacementField, warp
from .volume import Volume3, read_vol

logger = logging.getLogger(__name__)

RUN_ALL = ("phantom", "train", "predict", "bias", "cam", "register", "atlas", "report")
STAGES = RUN_ALL + ("baseline25d",)


@dataclass(frozen=True)
class Layout:
    """Fixed artifact directories below one output root."""

    root: Path

    @property
    def cohort(self) -> Path:
        return self.root / "cohort"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def cams(self) -> Path:
        return self.root / "cams"

    @property
    def transforms(self) -> Path:
        return self.root / "transforms"

    @property
    def atlases(self) -> Path:
        return self.root / "atlases"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def manifest(self) -> Path:
        return self.cohort / "manifest.jsonl"

    @property
    def checkpoint(self) -> Path:
        return self.checkpoints / "agenet.ckpt"

    @property
    def checkpoint_25d(self) -> Path:
        return self.checkpoints / "agenet25d.ckpt"

    @property
    def history(self) -> Path:
        return self.checkpoints / "history.csv"

    @property
    def history_25d(self) -> Path:
        return self.checkpoints / "history25d.csv"

    @property
    def bias(self) -> Path:
        return self.checkpoints / "bias.json"

    @property
    def bias_25d(self) -> Path:
        return self.checkpoints / "bias25d.json"

    @property
    def atlas_index(self) -> Path:
        return self.atlases / "index.json"

    def receipt(self, stage: str) -> Path:
        return self.root / "receipts" / stage / "stage.json"

    def group_failures(self, label: str) -> Path:
        return self.transforms / label / "failures.json"


class StageReceipt(BaseModel):
    """What a stage consumed and produced."""

    stage: str
    timestamp: str = Field(..., description="ISO time the stage finished")
    inputs_digest: str
    config_digest: str
    outputs_digest: str
    timings: Dict[str, Any]
    outputs: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.model_dump(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Path) -> Optional["StageReceipt"]:
        if not path.exists():
            return None
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError:
            logger.warning("Ignoring unreadable receipt %s", path)
            return None


@dataclass
class StageResult:
    outputs: List[Path]
    summary: Dict[str, Any] = field(default_factory=dict)


StageFn = Callable[[RunConfig, Layout, int], StageResult]


@dataclass(frozen=True)
class StageDef:
    run: StageFn
    upstream: Tuple[str, ...]
    sections: Tuple[str, ...]


def tree_digest(paths: Sequence[Path]) -> str:
    """sha256 over file names and bytes; directories are walked in sorted order."""
    h = hashlib.sha256()
    for root in sorted(Path(p) for p in paths):
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            if not f.exists():
                continue
            h.update(f.as_posix().encode("utf-8"))
            h.update(f.read_bytes())
    return h.hexdigest()


# -- shared loaders ----------------------------------------------------------


def load_manifest(layout: Layout, stage: str) -> Manifest:
    if not layout.manifest.exists():
        raise MissingArtifactError(
            stage, f"cohort manifest {layout.manifest}", "run the phantom stage"
        )
    return Manifest.load(layout.manifest)


def _require_field(records: Sequence[SubjectRecord], name: str, stage: str, hint: str) -> None:
    missing = [r.id for r in records if getattr(r, name) is None]
    if missing:
        raise MissingArtifactError(stage, f"manifest field {name} of subjects {missing[:5]}", hint)


def _test_records(manifest: Manifest) -> List[SubjectRecord]:
    records = [r for r in manifest if r.split == "test"]
    if not records:
        raise ValueError("the cohort has no test subjects")
    return records


def _write_json(payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def _write_history(history: Sequence[EpochRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([h.model_dump() for h in history]).to_csv(path, index=False, float_format="%.6f")
    return path


def read_history(path: Path) -> List[EpochRecord]:
    frame = pd.read_csv(path)
    return [EpochRecord(**row) for row in frame.to_dict(orient="records")]


def _bias_payload(model, n_fit: int, field_name: str) -> Dict[str, Any]:
    return {**model.to_dict(), "fitted_on": "val", "n": n_fit, "field": field_name}


# -- stages --------------------------------------------------------------------


def stage_phantom(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    n_train, n_val, n_test = cfg.cohort.sizes
    manifest = generate_cohort(cfg.phantom, n_train, n_val, n_test, layout.cohort, jobs)
    return StageResult(
        [layout.cohort],
        {"subjects": len(manifest), "train": n_train, "val": n_val, "test": n_test},
    )


def stage_train(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "train")
    train_ages = [r.age for r in manifest if r.split == "train"]
    if not train_ages:
        raise ValueError("the cohort has no training subjects")
    net = AgeNet(cfg.net, mean_age=float(np.mean(train_ages)))
    net, history = train(net, manifest, cfg.train, jobs=jobs)
    save_ckpt(net, layout.checkpoint)
    _write_history(history, layout.history)
    return StageResult(
        [layout.checkpoint, layout.history],
        {
            "epochs": len(history),
            "final_val_mae": history[-1].val_mae,
            "parameters": net.parameter_count(),
        },
    )


def stage_predict(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "predict")
    net = load_ckpt(layout.checkpoint, expected=cfg.net)
    manifest = predict_manifest(net, manifest, jobs)
    manifest.save(layout.manifest)
    return StageResult([layout.manifest], {"predicted": len(manifest)})


def stage_bias(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "bias")
    val = [r for r in manifest if r.split == "val"]
    _require_field(val, "predicted_age", "bias", "run the predict stage")
    model = fit_bias_records(val, cfg.analysis.bias_variant)
    manifest = manifest.merge(correct_records(model, manifest))
    manifest.save(layout.manifest)
    _write_json(_bias_payload(model, len(val), "predicted_age"), layout.bias)
    logger.info("Bias fit: slope %.4f, intercept %.4f", model.slope, model.intercept)
    return StageResult([layout.manifest, layout.bias], model.to_dict())


def stage_cam(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "cam")
    net = load_ckpt(layout.checkpoint, expected=cfg.net)
    test = manifest.filter(lambda r: r.split == "test")
    updated, failures = extract_cohort(
        net, test, layout.cams, checkpoint_digest(layout.checkpoint), cfg.gradcam.normalize, jobs
    )
    manifest = manifest.merge(updated.records)
    manifest.save(layout.manifest)
    return StageResult(
        [layout.manifest, layout.cams],
        {"extracted": len(test) - len(failures), "failed": len(failures)},
    )


def stage_register(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "register")
    test = _test_records(manifest)
    _require_field(test, "cam_path", "register", "run the cam stage")
    summary: Dict[str, Any] = {}
    for key, members in stratify(test, "cell").items():
        updated, failures = register_group(
            manifest,
            members,
            cfg.registration,
            layout.transforms / key.label,
            jobs,
            cfg.atlas.target_rule,
        )
        manifest = manifest.merge(updated)
        _write_json(
            {str(k): v for k, v in sorted(failures.items())}, layout.group_failures(key.label)
        )
        summary[key.label] = {
            "target": updated[0].registration_target,
            "members": len(members),
            "failed": len(failures),
        }
    manifest.save(layout.manifest)
    return StageResult([layout.manifest, layout.transforms], summary)


def _group_failures(layout: Layout, label: str) -> Dict[int, str]:
    path = layout.group_failures(label)
    if not path.exists():
        return {}
    return {int(k): v for k, v in json.loads(path.read_text(encoding="utf-8")).items()}


def stage_atlas(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "atlas")
    test = _test_records(manifest)
    _require_field(test, "cam_path", "atlas", "run the cam stage")
    _require_field(test, "registration_target", "atlas", "run the register stage")
    _require_field(test, "corrected_age", "atlas", "run the predict and bias stages")
    bounds = tuple(cfg.atlas.age_bounds)
    thresholds = (cfg.analysis.aligned, cfg.analysis.accelerated)
    index: List[Dict[str, Any]] = []

    def build(
        kind: str, key: GroupKey, members: Sequence[SubjectRecord], target: int, failures
    ) -> None:
        atlas = aggregate(
            manifest, members, key, target, failures, cfg.atlas.min_success_fraction, jobs
        )
        atlas.save(layout.atlases / key.label)
        index.append(
            {
                "label": key.label,
                "kind": kind,
                "key": key.to_dict(),
                "path": key.label,
                "target_id": target,
                "n_contributors": atlas.n_contributors,
                "n_members": len(members),
            }
        )

    for cell_key, members in stratify(test, "cell").items():
        target = members[0].registration_target
        failures = _group_failures(layout, cell_key.label)
        build("cell", cell_key, members, target, failures)
        # Sub-groups reuse the transforms to the cell target.
        for scheme, kind in (("cell+age", "age"), ("cell+gap", "gap")):
            for key, sub in stratify(members, scheme, bounds, *thresholds).items():
                try:
                    build(kind, key, sub, target, failures)
                except RegistrationError as e:
                    logger.warning("Skipping %s atlas %s: %s", kind, key.label, e)

    _write_json({"atlases": index}, layout.atlas_index)
    counts = {kind: sum(1 for e in index if e["kind"] == kind) for kind in ("cell", "age", "gap")}
    return StageResult([layout.atlases], counts)


def load_atlases(
    layout: Layout, stage: str = "report"
) -> List[Tuple[Dict[str, Any], ImportanceAtlas]]:
    if not layout.atlas_index.exists():
        raise MissingArtifactError(
            stage, f"atlas index {layout.atlas_index}", "run the atlas stage"
        )
    entries = json.loads(layout.atlas_index.read_text(encoding="utf-8"))["atlases"]
    return [(e, ImportanceAtlas.load(layout.atlases / e["path"])) for e in entries]


def _in_target_space(manifest: Manifest, record: SubjectRecord) -> Tuple[Volume3, Volume3]:
    image = read_vol(manifest.resolve(record.image_path))
    cam = read_vol(manifest.resolve(record.cam_path))
    unwarped = record.affine_path is None or record.field_path is None
    if unwarped or record.id == record.registration_target:
        return image, cam
    affine = AffineTransform.load(manifest.resolve(record.affine_path))
    dfield = DisplacementField.load(manifest.resolve(record.field_path))
    return warp(image, affine, dfield), warp(cam, affine, dfield)


def stage_report(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    manifest = load_manifest(layout, "report")
    test = _test_records(manifest)
    train_records = [r for r in manifest if r.split == "train"]
    _require_field(test, "corrected_age", "report", "run the predict and bias stages")
    reports, figures = layout.reports, layout.reports / "figures"
    outputs: List[Path] = []

    with_25d = all(r.corrected_age_25d is not None for r in test)
    table = metrics(test, train_records, "corrected_age", "corrected_age_25d" if with_25d else None)
    table.training_samples = {"mean_pred": None, "model": len(train_records)}
    if with_25d:
        table.training_samples["model_25d"] = len(train_records)
    outputs.append(table.to_csv(reports / "metrics.csv"))
    (reports / "metrics.txt").write_text(table.render() + "\n", encoding="utf-8")
    outputs.append(reports / "metrics.txt")
    outputs.append(
        scatter_export(
            test, reports / "scatter.csv", cfg.analysis.aligned, cfg.analysis.accelerated
        )
    )
    predictions_frame(manifest).to_csv(
        reports / "predictions.csv", index=False, float_format="%.6f"
    )
    outputs.append(reports / "predictions.csv")

    outputs.append(plots.bias_correction_figure(test, figures / "bias_correction.png"))
    outputs.append(plots.group_scatter_figure(test, figures / "group_scatter.png"))
    if layout.history.exists():
        history = read_history(layout.history)
        outputs.append(plots.training_curve(history, figures / "training_curve.png"))

    atlases = load_atlases(layout)
    records = manifest.by_id()
    rows = []
    for entry, atlas in atlases:
        gt = subject_ground_truth(cfg.phantom, records[entry["target_id"]])
        rows.append(
            localization_row(
                entry["label"],
                atlas.mean_cam,
                gt,
                kind=entry["kind"],
                age_band=entry["key"]["age_band"],
                gap_band=entry["key"]["gap_band"],
                n_contributors=atlas.n_contributors,
            )
        )
    localization = pd.DataFrame(rows)
    localization.to_csv(reports / "localization.csv", index=False, float_format="%.6f")
    outputs.append(reports / "localization.csv")

    cells = [a for e, a in atlases if e["kind"] == "cell"]
    for atlas in cells:
        outputs.extend(
            render_atlas_report(atlas, cfg.atlas.slices, reports / "overlays", cfg.atlas.alpha)
        )
    outputs.append(
        plots.atlas_sheet(cells, cfg.atlas.slices, figures / "atlas_sheet.png", cfg.atlas.alpha)
    )

    trend = spine_trend(localization)
    pd.DataFrame({"age_band": list(trend), "spine_mean": list(trend.values())}).to_csv(
        reports / "spine_trend.csv", index=False, float_format="%.6f"
    )
    outputs.append(reports / "spine_trend.csv")
    if trend:
        outputs.append(plots.spine_trend_figure(trend, figures / "spine_trend.png"))

    example = _gap_examples(cfg, manifest, test, atlases, figures / "gap_examples.png")
    if example is not None:
        outputs.append(example)

    summary = {
        "overall_mae": table.overall("model"),
        "overall_mean_pred": table.overall("mean_pred"),
        "atlases": len(atlases),
    }
    if with_25d:
        summary["overall_mae_25d"] = table.overall("model_25d")
    return StageResult(outputs, summary)


def spine_trend(localization: pd.DataFrame) -> Dict[str, float]:
    """Mean spine importance of the age-band atlases, averaged over cells, per band."""
    if localization.empty or "kind" not in localization.columns:
        return {}
    bands = localization[localization["kind"] == "age"]
    if bands.empty:
        return {}
    means = bands.groupby("age_band")["spine_mean"].mean()
    return {band: float(means[band]) for band in AGE_BANDS if band in means.index}


def _gap_examples(
    cfg: RunConfig,
    manifest: Manifest,
    test: Sequence[SubjectRecord],
    atlases: Sequence[Tuple[Dict[str, Any], ImportanceAtlas]],
    path: Path,
) -> Optional[Path]:
    group = cfg.atlas.example_group
    members = [r for r in test if f"{r.sex}_{r.bmi_group}" == group]
    if not members:
        logger.warning("No test subjects in example group %s", group)
        return None
    band_atlases = {
        e["key"]["gap_band"]: a
        for e, a in atlases
        if e["kind"] == "gap" and a.key.cell.label == group and e["key"]["gap_band"] in GAP_BANDS
    }
    examples = {
        band: [(r, *_in_target_space(manifest, r)) for r in chosen]
        for band, chosen in top_gap_examples(members, cfg.atlas.top_k).items()
    }
    plane = next(iter(cfg.atlas.slices))
    indices = cfg.atlas.slices[plane]
    return plots.gap_examples_figure(
        band_atlases, examples, plane, indices[len(indices) // 2], path, cfg.atlas.alpha
    )


def stage_baseline25d(cfg: RunConfig, layout: Layout, jobs: int) -> StageResult:
    if not cfg.baseline25d.enabled:
        logger.info("2.5D baseline disabled")
        return StageResult([], {"enabled": False})
    manifest = load_manifest(layout, "baseline25d")
    manifest = project_cohort(manifest, jobs)
    net, history = train25d(manifest, cfg.baseline25d, cfg.train, cfg.phantom.dims, jobs)
    save_ckpt(net, layout.checkpoint_25d)
    _write_history(history, layout.history_25d)
    manifest = predict25d(net, manifest, jobs)
    val = [r for r in manifest if r.split == "val"]
    model = fit_bias(
        [r.age for r in val], [r.predicted_age_25d for r in val], cfg.analysis.bias_variant
    )
    manifest = manifest.merge(
        correct_records(model, manifest, "predicted_age_25d", "corrected_age_25d")
    )
    manifest.save(layout.manifest)
    _write_json(_bias_payload(model, len(val), "predicted_age_25d"), layout.bias_25d)
    return StageResult(
        [layout.manifest, layout.checkpoint_25d, layout.history_25d, layout.bias_25d],
        {"epochs": len(history), "final_val_mae": history[-1].val_mae if history else None},
    )


STAGE_DEFS: Dict[str, StageDef] = {
    "phantom": StageDef(stage_phantom, (), ("seed", "phantom", "cohort")),
    "train": StageDef(stage_train, ("phantom",), ("seed", "net", "train")),
    "predict": StageDef(stage_predict, ("phantom", "train"), ("net",)),
    "bias": StageDef(stage_bias, ("predict",), ("analysis",)),
    "cam": StageDef(stage_cam, ("phantom", "train"), ("net", "gradcam")),
    "register": StageDef(
        stage_register, ("phantom", "cam"), ("registration", "atlas.target_rule")
    ),
    "atlas": StageDef(stage_atlas, ("bias", "cam", "register"), ("atlas", "analysis")),
    "report": StageDef(
        stage_report, ("train", "bias", "atlas", "baseline25d"), ("phantom", "atlas", "analysis")
    ),
    "baseline25d": StageDef(
        stage_baseline25d, ("phantom",), ("seed", "baseline25d", "train", "analysis")
    ),
}


def _sections_digest(cfg: RunConfig, sections: Sequence[str]) -> str:
    """Digest of the named config sections; ``section.field`` names a single field."""
    dumped = {}
    for name in sections:
        value: Any = cfg
        for part in name.split("."):
            value = getattr(value, part)
        dumped[name] = value
    return digest(
        {
            k: v.model_dump(mode="json") if isinstance(v, BaseModel) else v
            for k, v in dumped.items()
        }
    )


def _inputs_digest(layout: Layout, upstream: Sequence[str]) -> str:
    parts = {}
    for name in upstream:
        receipt = StageReceipt.load(layout.receipt(name))
        parts[name] = receipt.outputs_digest if receipt else "absent"
    return digest(parts)


def run_stage(cfg: RunConfig, stage: str, jobs: int = 1, force: bool = False) -> StageReceipt:
    """
    Run one stage unless its receipt is current, and write the new receipt.

    Raises:
        ValueError: For an unknown stage name.
        MissingArtifactError: If an upstream artifact is absent.
        SubjectFailureError: After the receipt is written, if some subjects failed.
    """
    if stage not in STAGE_DEFS:
        raise ValueError(f"unknown stage '{stage}'; use one of {STAGES}")
    cfg = cfg.seeded()
    stage_def = STAGE_DEFS[stage]
    layout = Layout(Path(cfg.output_root))
    inputs = _inputs_digest(layout, stage_def.upstream)
    config = _sections_digest(cfg, stage_def.sections)

    previous = StageReceipt.load(layout.receipt(stage))
    if (
        not force
        and previous is not None
        and previous.inputs_digest == inputs
        and previous.config_digest == config
        and all(Path(p).exists() for p in previous.outputs)
        and not previous.summary.get("failed")
    ):
        logger.info("Stage %s is up to date", stage)
        return previous

    logger.info("Running stage %s (jobs=%d)", stage, jobs)
    started = datetime.now()
    clock = time.perf_counter()
    result = stage_def.run(cfg, layout, jobs)
    seconds = time.perf_counter() - clock
    receipt = StageReceipt(
        stage=stage,
        timestamp=datetime.now().isoformat(),
        inputs_digest=inputs,
        config_digest=config,
        outputs_digest=tree_digest(result.outputs),
        timings={"started": started.isoformat(), "seconds": round(seconds, 3)},
        outputs=[str(p) for p in result.outputs],
        summary=result.summary,
    )
    receipt.save(layout.receipt(stage))
    logger.info("Stage %s finished in %.1fs", stage, seconds)
    if receipt.summary.get("failed"):
        raise SubjectFailureError(stage, receipt.summary["failed"])
    return receipt


def run_all(cfg: RunConfig, jobs: int = 1, force: bool = False) -> List[StageReceipt]:
    return [run_stage(cfg, stage, jobs, force) for stage in RUN_ALL]
