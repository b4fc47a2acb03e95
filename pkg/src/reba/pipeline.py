"""Stage orchestration with on-disk artifacts and hash-checked provenance.

Run layout (``root``)::

    config.json
    data/      dataset (manifest.csv, atlas.vol, volumes/, ...)
    teacher/   teacher.ckpt, history.csv
    labels/    rho.json, soft_labels.csv (HC train), teacher_reba.csv (all), embeddings.npy
    student/   student.ckpt, history.csv, predictions_raw.csv
    eval/      metrics.json, hcs_per_region.csv, ndc_per_subject.csv, histograms.csv
    report.md

Every stage directory holds ``provenance.json`` with the stage config hash and
the SHA-256 of each input and output file.
"""

from __future__ import annotations

import contextlib
import functools
import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch

from . import student as S
from . import teacher as T
from .backbone import load_backbone, reference_backbone, save_backbone
from .config import ExperimentConfig
from .datagen import HC, TRAIN, generate_cohort, load_dataset
from .evalmetrics import cohort_report
from .io import sha256_file
from .parcellate import NoiseSpec, one_hot

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-teacher", "build-soft-labels", "train-student", "evaluate")

# config keys each stage depends on (cumulative along the chain)
_STAGE_KEYS = {
    "gen-data": ("dataset",),
    "train-teacher": ("model", "teacher_opt"),
    "build-soft-labels": ("alpha", "eta", "dilate_occlusion"),
    "train-student": ("student_opt", "zeta", "use_film", "use_student", "labels", "detach_network_mean"),
    "evaluate": ("metrics",),
}

ABLATION_ROWS = (
    ("1", "chron-labels", {"labels": "chron"}),
    ("2", "alpha-0", {"labels": "init"}),
    ("3", "no-student", {"use_student": False}),
    ("4", "no-film", {"use_film": False}),
    ("5", "zeta-0", {"zeta": 0.0}),
    ("6", "full", {}),
)


class ArtifactError(RuntimeError):
    pass


class MissingArtifactError(ArtifactError):
    pass


class HashMismatchError(ArtifactError):
    pass


def stage_keys(stage: str) -> tuple[str, ...]:
    keys: list[str] = []
    for s in STAGES:
        keys += _STAGE_KEYS[s]
        if s == stage:
            return tuple(keys)
    raise ValueError(f"unknown stage {stage!r}")


@contextlib.contextmanager
def single_threaded():
    """Pin intra-op parallelism to one thread for reproducible training."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass(frozen=True)
class Layout:
    data: Path
    teacher: Path
    labels: Path
    student: Path
    eval: Path

    @classmethod
    def under(cls, root: Path) -> Layout:
        return cls(root / "data", root / "teacher", root / "labels", root / "student", root / "eval")

    def dir(self, stage: str) -> Path:
        return {
            "gen-data": self.data,
            "train-teacher": self.teacher,
            "build-soft-labels": self.labels,
            "train-student": self.student,
            "evaluate": self.eval,
        }[stage]


_OUTPUTS = {
    "gen-data": ("manifest.csv", "dataset.json", "atlas.vol", "atlas.json", "networks.json", "priors.json"),
    "train-teacher": ("teacher.ckpt", "history.csv"),
    "build-soft-labels": ("rho.json", "soft_labels.csv", "teacher_reba.csv", "embeddings.npy"),
    "train-student": ("predictions_raw.csv", "history.csv"),
    "evaluate": ("metrics.json", "hcs_per_region.csv", "ndc_per_subject.csv", "histograms.csv"),
}
_PREDECESSOR = dict(zip(STAGES[1:], STAGES[:-1]))


class Pipeline:
    """Runs stages for one config inside ``root``.

    ``layout`` may point the upstream stages at a shared run (ablation
    variants reuse one dataset, teacher and label set).
    """

    def __init__(self, config: ExperimentConfig, root: str | Path | None = None, layout: Layout | None = None):
        config.validate()
        self.config = config
        self.root = Path(root) if root is not None else config.output_root()
        self.layout = layout or Layout.under(self.root)

    # provenance ---------------------------------------------------------

    def config_hash(self, stage: str) -> str:
        return self.config.digest(*stage_keys(stage))

    def _outputs(self, stage: str) -> list[Path]:
        d = self.layout.dir(stage)
        files = [d / n for n in _OUTPUTS[stage]]
        if stage == "gen-data":
            files += sorted((d / "volumes").glob("*.vol"))
        if stage == "train-student" and (d / "student.ckpt").exists():
            files.append(d / "student.ckpt")
        return files

    def _rel(self, stage: str, path: Path) -> str:
        return str(path.relative_to(self.layout.dir(stage)))

    def _provenance_path(self, stage: str) -> Path:
        return self.layout.dir(stage) / "provenance.json"

    def verified_outputs(self, stage: str) -> dict[str, str]:
        """Hashes of a finished stage's outputs, checked against its provenance."""
        prov_path = self._provenance_path(stage)
        if not prov_path.exists():
            raise MissingArtifactError(f"no artifacts from stage '{stage}' in {self.layout.dir(stage)}; run `reba {stage}` first")
        prov = json.loads(prov_path.read_text())
        for rel, digest in prov["outputs"].items():
            path = self.layout.dir(stage) / rel
            if not path.exists():
                raise MissingArtifactError(f"{path} is missing; rerun `reba {stage}`")
            actual = sha256_file(path)
            if actual != digest:
                raise HashMismatchError(f"hash mismatch for {path}: recorded {digest[:12]}, found {actual[:12]}")
        return prov["outputs"]

    def _inputs(self, stage: str) -> dict[str, dict[str, str]]:
        pred = _PREDECESSOR.get(stage)
        chain = []
        while pred:
            chain.append(pred)
            pred = _PREDECESSOR.get(pred)
        return {s: self.verified_outputs(s) for s in reversed(chain)}

    def _is_cached(self, stage: str, inputs: dict) -> bool:
        prov_path = self._provenance_path(stage)
        if not prov_path.exists():
            return False
        prov = json.loads(prov_path.read_text())
        if prov.get("config_hash") != self.config_hash(stage) or prov.get("inputs") != inputs:
            return False
        try:
            self.verified_outputs(stage)
        except ArtifactError:
            return False
        return True

    def _record(self, stage: str, inputs: dict) -> None:
        outputs = {self._rel(stage, p): sha256_file(p) for p in self._outputs(stage)}
        prov = {"stage": stage, "config_hash": self.config_hash(stage), "inputs": inputs, "outputs": outputs}
        self._provenance_path(stage).write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")

    def _run_stage(self, stage: str, body: Callable[[], None], cached: bool) -> str:
        inputs = self._inputs(stage)
        if cached and self._is_cached(stage, inputs):
            log.info("%s: cached", stage)
            return "cached"
        self.layout.dir(stage).mkdir(parents=True, exist_ok=True)
        self._provenance_path(stage).unlink(missing_ok=True)
        with single_threaded():
            body()
        self._record(stage, inputs)
        log.info("%s: done", stage)
        return "ran"

    # stages -------------------------------------------------------------

    def gen_data(self, force: bool = False, cached: bool = False) -> str:
        d = self.layout.data
        if cached and self._is_cached("gen-data", {}):
            return "cached"
        if d.exists() and any(d.iterdir()):
            if not force:
                raise FileExistsError(f"{d} is not empty; pass --force to regenerate")
            shutil.rmtree(d)

        def body():
            generate_cohort(self.config.dataset, d)

        return self._run_stage("gen-data", body, cached=False)

    def _noise(self) -> NoiseSpec:
        return NoiseSpec(self.config.eta, self.config.seed)

    def train_teacher(self, cached: bool = False) -> str:
        def body():
            ds = load_dataset(self.layout.data)
            records, volumes = T.dataset_split(ds, split=TRAIN, cohort=HC)
            m = self.config.model
            factory = functools.partial(
                reference_backbone, ds.atlas.shape, m.d_m, self.config.seed, channels=tuple(m.channels), hidden=m.hidden
            )
            model, history = T.train_teacher(records, volumes, factory, self.config.teacher_opt, self.config.seed)
            save_backbone(self.layout.teacher / "teacher.ckpt", model, {"config_hash": self.config_hash("train-teacher")})
            pd.DataFrame(history).to_csv(self.layout.teacher / "history.csv", index=False, float_format="%.17g")

        return self._run_stage("train-teacher", body, cached)

    def build_soft_labels(self, cached: bool = False) -> str:
        def body():
            ds = load_dataset(self.layout.data)
            teacher, _ = load_backbone(self.layout.teacher / "teacher.ckpt")
            masks = one_hot(ds.atlas)
            noise = self._noise()
            train, x_train = T.dataset_split(ds, split=TRAIN, cohort=HC)
            rho = T.correction_vector(teacher, train, x_train, masks, noise, self.config.dilate_occlusion)
            T.write_rho(self.layout.labels / "rho.json", rho, self.config.alpha, self.config.eta)
            everyone = ds.manifest.subjects
            x_all = ds.stack([r.id for r in everyone])
            table = T.soft_labels(teacher, everyone, x_all, masks, noise, rho, self.config.alpha)
            table.subset([r.id for r in train]).to_csv(self.layout.labels / "soft_labels.csv")
            table.to_csv(self.layout.labels / "teacher_reba.csv")
            emb = S.region_embeddings(teacher, [r.id for r in everyone], x_all, masks, noise)
            np.save(self.layout.labels / "embeddings.npy", emb.numpy())

        return self._run_stage("build-soft-labels", body, cached)

    def _targets(self, table: T.SoftLabelTable, ages: np.ndarray) -> np.ndarray:
        if self.config.labels == "soft":
            return table.y_soft
        if self.config.labels == "init":
            return table.y_init
        return np.repeat(ages[:, None], table.n_regions, axis=1)

    def train_student(self, cached: bool = False) -> str:
        def body():
            ds = load_dataset(self.layout.data)
            everyone = ds.manifest.subjects
            out = self.layout.student
            (out / "student.ckpt").unlink(missing_ok=True)
            table = T.SoftLabelTable.from_csv(self.layout.labels / "teacher_reba.csv", self.config.alpha)
            if table.ids != [r.id for r in everyone]:
                raise ArtifactError("teacher_reba.csv does not match the dataset manifest")
            if not self.config.use_student:
                S.prediction_frame(everyone, self._targets(table, ds.ages(table.ids))).to_csv(
                    out / "predictions_raw.csv", index=False, float_format="%.17g"
                )
                pd.DataFrame(columns=["epoch", "lr", "loss", "l_dist", "l_func"]).to_csv(out / "history.csv", index=False)
                return
            teacher, _ = load_backbone(self.layout.teacher / "teacher.ckpt")
            emb = torch.from_numpy(np.load(self.layout.labels / "embeddings.npy"))
            train_idx = [n for n, r in enumerate(everyone) if r.is_hc and r.split == TRAIN]
            targets = self._targets(table, ds.ages(table.ids))[train_idx]
            m = self.config.model
            student = S.build_student(
                teacher,
                ds.atlas.n_regions,
                m.d_p,
                m.hidden,
                target_mean=float(targets.mean()),
                target_scale=float(targets.std()) or 1.0,
                use_film=self.config.use_film,
                seed=self.config.seed,
            )
            student, history = S.train_student(
                student,
                emb[train_idx],
                targets,
                ds.networks,
                self.config.zeta,
                self.config.student_opt,
                self.config.seed,
                self.config.detach_network_mean,
            )
            backbone_hash = sha256_file(self.layout.teacher / "teacher.ckpt")
            S.save_student(out / "student.ckpt", student, backbone_hash, {"config_hash": self.config_hash("train-student")})
            pd.DataFrame(history).to_csv(out / "history.csv", index=False, float_format="%.17g")
            S.prediction_frame(everyone, S.predict_cohort(student, emb)).to_csv(
                out / "predictions_raw.csv", index=False, float_format="%.17g"
            )

        return self._run_stage("train-student", body, cached)

    def evaluate(self, cached: bool = False, hc_shift: float = 0.0) -> str:
        def body():
            ds = load_dataset(self.layout.data)
            preds = pd.read_csv(self.layout.student / "predictions_raw.csv", dtype={"id": str}, float_precision="round_trip")
            report = cohort_report(preds, ds.manifest, ds.priors, self.config.metrics, hc_shift)
            echo = self.config.to_dict()
            echo.pop("root")
            doc = report.to_json(echo)
            doc["config_hash"] = self.config_hash("evaluate")
            out = self.layout.eval
            (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            pd.DataFrame(
                {"region": range(1, len(report.hcs_per_region) + 1), "hcs": report.hcs_per_region}
            ).to_csv(out / "hcs_per_region.csv", index=False, float_format="%.17g")
            report.ndc_per_subject.to_csv(out / "ndc_per_subject.csv", index=False, float_format="%.17g")
            report.histograms.to_csv(out / "histograms.csv", index=False)

        return self._run_stage("evaluate", body, cached)

    def metrics(self) -> dict:
        self.verified_outputs("evaluate")
        return json.loads((self.layout.eval / "metrics.json").read_text())

    def run_all(self, force: bool = False, cached: bool = False) -> dict[str, str]:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config.save(self.root / "config.json")
        status = {"gen-data": self.gen_data(force=force, cached=cached)}
        status["train-teacher"] = self.train_teacher(cached)
        status["build-soft-labels"] = self.build_soft_labels(cached)
        status["train-student"] = self.train_student(cached)
        status["evaluate"] = self.evaluate(cached)
        write_report(self.root / "report.md", self.metrics())
        return status


# reporting -------------------------------------------------------------


def summary_row(metrics: dict) -> dict:
    row = {"hcs_overall": metrics["hcs"]["overall"]}
    row.update({f"ndc_{k}": v for k, v in sorted(metrics["ndc"]["differences"].items())})
    row["spearman_hc_test"] = metrics["oracle"]["spearman_hc_test_mean"]
    row["region_spread_hc_test"] = metrics["oracle"]["region_spread_hc_test_mean"]
    return row


def write_report(path, metrics: dict, ablation: pd.DataFrame | None = None) -> str:
    lines = ["# Regional brain age run", "", f"config hash: `{metrics['config_hash']}`", ""]
    lines += ["## Healthy-control similarity", "", f"overall HCS: {metrics['hcs']['overall']:.4f}", ""]
    lines += ["| region | HCS |", "|---|---|"]
    lines += [f"| {r} | {h:.4f} |" for r, h in enumerate(metrics["hcs"]["per_region"], 1)]
    lines += ["", "## Disease correlation (NDC)", "", "| prior | cohort | mean NDC |", "|---|---|---|"]
    for prior, groups in sorted(metrics["ndc"]["cohort_mean"].items()):
        lines += [f"| {prior} | {g} | {v:.4f} |" for g, v in sorted(groups.items())]
    lines += ["", "| difference | value |", "|---|---|"]
    lines += [f"| {k} | {v:.4f} |" for k, v in sorted(metrics["ndc"]["differences"].items())]
    lines += ["", "## Oracle recovery (synthetic ground truth)", ""]
    lines += [f"- {k}: {v:.4f}" for k, v in sorted(metrics["oracle"].items())]
    if ablation is not None:
        lines += ["", "## Ablation (mean over seeds)", "", _markdown_table(ablation)]
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def _markdown_table(df: pd.DataFrame) -> str:
    cols = list(df.columns)
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for _, r in df.iterrows():
        out.append("| " + " | ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r) + " |")
    return "\n".join(out)


# ablation --------------------------------------------------------------


def variant_config(base: ExperimentConfig, seed: int, overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(base.to_dict())
    cfg.dataset = replace(cfg.dataset, seed=seed)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def run_ablation(config: ExperimentConfig, root: str | Path | None = None, cached: bool = False, rows=ABLATION_ROWS) -> pd.DataFrame:
    """Rows 1-6 per seed; one dataset, teacher and label set shared by all rows of a seed."""
    root = Path(root) if root is not None else config.output_root()
    out = root / "ablation"
    records = []
    for seed in config.ablation_seeds:
        seed_root = out / f"seed-{seed}"
        base = Pipeline(variant_config(config, seed, {}), seed_root)
        base.root.mkdir(parents=True, exist_ok=True)
        base.gen_data(force=True, cached=cached)
        base.train_teacher(cached)
        base.build_soft_labels(cached)
        for row, name, overrides in rows:
            vroot = seed_root / "variants" / name
            shared = replace(Layout.under(vroot), data=base.layout.data, teacher=base.layout.teacher, labels=base.layout.labels)
            p = Pipeline(variant_config(config, seed, overrides), vroot, shared)
            p.train_student(cached)
            p.evaluate(cached)
            records.append({"seed": seed, "row": row, "variant": name, **summary_row(p.metrics())})
    df = pd.DataFrame(records)
    out.mkdir(parents=True, exist_ok=True)
    df.to_csv(out / "ablation.csv", index=False, float_format="%.17g")
    means = df.drop(columns="seed").groupby(["row", "variant"], sort=True).mean().reset_index()
    (out / "ablation.json").write_text(
        json.dumps({"seeds": list(config.ablation_seeds), "per_seed": records, "mean": means.to_dict("records")}, indent=2) + "\n"
    )
    return df
