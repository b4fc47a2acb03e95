"""Whole-brain Teacher and occlusion-corrected soft regional labels."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import torch

from .backbone import OptimizerConfig, RegressorModel, checksum, mae_loss, train_regressor
from .datagen import HC, TRAIN, Dataset, SubjectRecord
from .parcellate import NoiseSpec, RegionMask, extract_region, occlude_region, occlusion_mask

log = logging.getLogger(__name__)


class CohortError(ValueError):
    pass


def teacher_loss(pred, ages) -> float:
    """Mean absolute error between whole-brain predictions and chronological ages."""
    pred = np.asarray(pred, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    return float(np.mean(np.abs(pred - ages)))


def _check_hc_train(records: Sequence[SubjectRecord]) -> None:
    if not records:
        raise CohortError("empty training split")
    bad = [r.id for r in records if r.cohort != HC or r.split != TRAIN]
    if bad:
        raise CohortError(f"teacher training accepts HC train subjects only; offending ids: {bad[:5]}")


def input_stats(volumes: np.ndarray, ages: np.ndarray) -> dict:
    """Cohort-level normalisation constants for the backbone (foreground voxels only)."""
    fg = volumes[volumes != 0]
    return {
        "input_mean": float(fg.mean()),
        "input_std": float(fg.std()) or 1.0,
        "age_bias": float(np.mean(ages)),
        "age_scale": float(np.std(ages)) or 1.0,
    }


def train_teacher(
    records: Sequence[SubjectRecord],
    volumes: np.ndarray,
    backbone_factory: Callable[..., RegressorModel],
    optimizer_config: OptimizerConfig,
    seed: int,
) -> tuple[RegressorModel, list[dict]]:
    """Fit whole volume -> chronological age with an MAE loss, then freeze."""
    _check_hc_train(records)
    ages = np.array([r.chronological_age for r in records])
    model = backbone_factory(**input_stats(volumes, ages))
    x = torch.from_numpy(np.asarray(volumes, dtype=np.float32))
    y = torch.from_numpy(ages.astype(np.float32))

    def loss_fn(m, xb, yb):
        return mae_loss(m.predict_age(xb), yb)

    model, history = train_regressor(model, (x, y), loss_fn, optimizer_config, seed)
    return model.freeze(), history


@torch.no_grad()
def predict_whole(model: RegressorModel, volumes: np.ndarray, batch: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(volumes), batch):
        xb = torch.from_numpy(np.asarray(volumes[i : i + batch], dtype=np.float32))
        out.append(model.predict_age(xb).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def region_inputs(volume, masks: Sequence[RegionMask], noise: NoiseSpec, key) -> np.ndarray:
    """Stack of extracted-region volumes, one per region (dilated masks)."""
    return np.stack([extract_region(volume, m.dilated, noise, key=(key, m.region)) for m in masks])


def occluded_inputs(volume, masks, noise: NoiseSpec, key, dilate_occlusion: bool = False) -> np.ndarray:
    return np.stack(
        [occlude_region(volume, occlusion_mask(m, dilate_occlusion), noise, key=(key, m.region)) for m in masks]
    )


def _require_frozen(teacher: RegressorModel) -> None:
    if not getattr(teacher, "frozen", False):
        raise ValueError("teacher must be frozen")


def initial_reba(teacher: RegressorModel, volume, masks, noise: NoiseSpec, key="") -> np.ndarray:
    """Teacher prediction on each region isolated from the rest of the volume."""
    _require_frozen(teacher)
    return predict_whole(teacher, region_inputs(volume, masks, noise, key))


@dataclass
class CorrectionVector:
    rho: np.ndarray
    n_subjects_used: int
    y_whole: dict[str, float] = field(default_factory=dict)


def correction_vector(
    teacher: RegressorModel,
    records: Sequence[SubjectRecord],
    volumes: np.ndarray,
    masks: Sequence[RegionMask],
    noise: NoiseSpec,
    dilate_occlusion: bool = False,
) -> CorrectionVector:
    """Mean drop of the whole-brain prediction when each region is occluded."""
    _require_frozen(teacher)
    _check_hc_train(records)
    whole = predict_whole(teacher, volumes)
    diffs = np.zeros((len(records), len(masks)))
    for n, (rec, vol) in enumerate(zip(records, volumes)):
        occluded = predict_whole(teacher, occluded_inputs(vol, masks, noise, rec.id, dilate_occlusion))
        diffs[n] = whole[n] - occluded
    return CorrectionVector(diffs.mean(axis=0), len(records), {r.id: float(w) for r, w in zip(records, whole)})


def apply_correction(y_whole, y_init, rho, alpha: float) -> np.ndarray:
    """Shift ``y_init[r]`` by ``alpha * rho[r]`` where ``(y_whole - y_init[r]) * rho[r] > 0``.

    Broadcasts over leading subject axes: ``y_whole`` (N,), ``y_init`` (N, R), ``rho`` (R,).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    y_whole = np.asarray(y_whole, dtype=np.float64)
    y_init = np.asarray(y_init, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    gate = (y_whole[..., None] - y_init) * rho > 0
    return y_init + np.where(gate, alpha * rho, 0.0)


@dataclass
class SoftLabelTable:
    ids: list[str]
    y_whole: np.ndarray
    y_init: np.ndarray
    y_soft: np.ndarray
    alpha: float

    @property
    def n_regions(self) -> int:
        return self.y_init.shape[1]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"id": self.ids, "y_whole": self.y_whole})
        for r in range(self.n_regions):
            df[f"y_init_r{r + 1}"] = self.y_init[:, r]
        for r in range(self.n_regions):
            df[f"y_soft_r{r + 1}"] = self.y_soft[:, r]
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, alpha: float = float("nan")) -> SoftLabelTable:
        df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        R = sum(1 for c in df.columns if c.startswith("y_init_r"))
        return cls(
            df["id"].astype(str).tolist(),
            df["y_whole"].to_numpy(np.float64),
            df[[f"y_init_r{r}" for r in range(1, R + 1)]].to_numpy(np.float64),
            df[[f"y_soft_r{r}" for r in range(1, R + 1)]].to_numpy(np.float64),
            alpha,
        )

    def subset(self, ids: Sequence[str]) -> SoftLabelTable:
        pos = {i: n for n, i in enumerate(self.ids)}
        try:
            idx = [pos[i] for i in ids]
        except KeyError as exc:
            raise KeyError(f"subject {exc.args[0]} missing from soft-label table") from None
        return SoftLabelTable(list(ids), self.y_whole[idx], self.y_init[idx], self.y_soft[idx], self.alpha)


def soft_labels(
    teacher: RegressorModel,
    records: Sequence[SubjectRecord],
    volumes: np.ndarray,
    masks: Sequence[RegionMask],
    noise: NoiseSpec,
    rho: CorrectionVector,
    alpha: float,
) -> SoftLabelTable:
    """Initial regional predictions plus the gated correction.

    Whole-brain predictions cached in ``rho.y_whole`` are reused; other
    subjects (test or disease cohorts) get a fresh forward pass.
    """
    _require_frozen(teacher)
    before = checksum(teacher)
    missing = [n for n, r in enumerate(records) if r.id not in rho.y_whole]
    whole = np.array([rho.y_whole.get(r.id, np.nan) for r in records])
    if missing:
        whole[missing] = predict_whole(teacher, volumes[missing])
    init = np.stack([initial_reba(teacher, v, masks, noise, key=r.id) for r, v in zip(records, volumes)])
    soft = apply_correction(whole, init, rho.rho, alpha)
    if checksum(teacher) != before:
        raise RuntimeError("teacher parameters changed while building labels")
    return SoftLabelTable([r.id for r in records], whole, init, soft, alpha)


def write_rho(path, rho: CorrectionVector, alpha: float, eta: float) -> None:
    Path(path).write_text(
        json.dumps(
            {"alpha": alpha, "eta": eta, "rho": [float(v) for v in rho.rho], "n_subjects_used": rho.n_subjects_used},
            indent=2,
        )
    )


def read_rho(path) -> tuple[CorrectionVector, float, float]:
    obj = json.loads(Path(path).read_text())
    return CorrectionVector(np.asarray(obj["rho"], dtype=np.float64), int(obj["n_subjects_used"])), obj["alpha"], obj["eta"]


def dataset_split(ds: Dataset, **selector) -> tuple[list[SubjectRecord], np.ndarray]:
    records = ds.manifest.select(**selector)
    return records, ds.stack([r.id for r in records]) if records else np.zeros((0, *ds.atlas.shape), np.float32)
