"""Synthetic phantom cohorts with a known atlas and planted regional ages.

Intensity law (per subject, per region r, per foreground voxel v in r)::

    I[v] = base_intensity - decay_rate * planted_age[r] + anatomy[r] + noise_sigma * z[v]

with ``anatomy[r] ~ N(0, anatomy_sigma^2)`` an age-independent per-subject
regional offset (off by default) and ``z[v] ~ N(0, 1)``. Background voxels are exactly 0.
In expectation the law inverts to ``age = (base_intensity - mean(I_r)) / decay_rate``.

Planted ages of HC subjects are ``chron + net_dev[k(r)] + reg_dev[r]`` where
``net_dev ~ U(-s*J, s*J)`` is shared by all regions of network k and
``reg_dev ~ U(-(1-s)*J, (1-s)*J)``; J is ``hc_jitter`` and s ``network_share``.
Disease subjects receive the same draws plus ``offset`` on their prior regions.

Draw order of the cohort generator (one ``default_rng(seed)``): for each
cohort in order (HC train, HC test, diseases in config order) and each subject
in index order: age, network deviations (K), region deviations (R).
Volumes use an independent stream per subject, ``SeedSequence([seed, index])``,
where index is the subject's position in the manifest.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .io import read_volume, write_volume

log = logging.getLogger(__name__)

HC = "HC"
TRAIN, TEST = "train", "test"


class GenerationError(ValueError):
    pass


@dataclass
class Atlas:
    labels: np.ndarray
    n_regions: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.min() < 0 or self.labels.max() > self.n_regions:
            raise GenerationError(f"atlas labels must lie in [0, {self.n_regions}]")
        counts = np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)
        empty = [r for r in range(1, self.n_regions + 1) if counts[r] == 0]
        if empty:
            raise GenerationError(f"atlas regions without voxels: {empty}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)[1:]


@dataclass
class NetworkMap:
    """Total map region id (1..R) -> network id (1..K)."""

    assignments: dict[int, int]
    n_networks: int

    def __post_init__(self):
        self.assignments = {int(r): int(k) for r, k in self.assignments.items()}
        if sorted(self.assignments) != list(range(1, len(self.assignments) + 1)):
            raise GenerationError("network map must cover region ids 1..R exactly")
        used = set(self.assignments.values())
        if not used <= set(range(1, self.n_networks + 1)):
            raise GenerationError("network ids must lie in 1..K")
        missing = set(range(1, self.n_networks + 1)) - used
        if missing:
            raise GenerationError(f"networks without members: {sorted(missing)}")

    @property
    def n_regions(self) -> int:
        return len(self.assignments)

    def members(self, k: int) -> list[int]:
        return sorted(r for r, kk in self.assignments.items() if kk == k)

    def groups(self) -> list[list[int]]:
        return [self.members(k) for k in range(1, self.n_networks + 1)]

    def to_json(self) -> dict:
        return {"n_networks": self.n_networks, "assignments": {str(r): k for r, k in sorted(self.assignments.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> NetworkMap:
        return cls({int(r): int(k) for r, k in obj["assignments"].items()}, int(obj["n_networks"]))


@dataclass
class DiseasePrior:
    name: str
    regions: tuple[int, ...]
    relevance: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.regions = tuple(sorted(int(r) for r in self.regions))
        if not self.relevance:
            self.relevance = {r: "strong" for r in self.regions}

    def validate(self, n_regions: int) -> None:
        if not self.regions:
            raise GenerationError(f"disease {self.name!r} has an empty region set")
        bad = [r for r in self.regions if not 1 <= r <= n_regions]
        if bad:
            raise GenerationError(f"disease {self.name!r} references region ids outside 1..{n_regions}: {bad}")


@dataclass
class SubjectRecord:
    id: str
    chronological_age: float
    cohort: str
    split: str
    planted_regional_age: np.ndarray

    @property
    def is_hc(self) -> bool:
        return self.cohort == HC

    @property
    def disease(self) -> str | None:
        return None if self.is_hc else self.cohort.split(":", 1)[1]


def disease_tag(name: str) -> str:
    return f"disease:{name}"


@dataclass
class DiseaseConfig:
    name: str
    regions: list[int]
    offset: float = 8.0
    n: int = 30


def _default_diseases() -> list[DiseaseConfig]:
    return [DiseaseConfig("PD", [1, 2, 3]), DiseaseConfig("AD", [7, 8])]


@dataclass
class DatasetConfig:
    shape: list[int] = field(default_factory=lambda: [32, 32, 32])
    n_regions: int = 8
    n_networks: int = 3
    seed: int = 0
    n_hc_train: int = 100
    n_hc_test: int = 50
    age_min: float = 20.0
    age_max: float = 80.0
    hc_jitter: float = 9.0
    network_share: float = 0.8
    base_intensity: float = 1.0
    decay_rate: float = 0.01
    noise_sigma: float = 0.05
    anatomy_sigma: float = 0.0
    diseases: list[DiseaseConfig] = field(default_factory=_default_diseases)

    def __post_init__(self):
        self.diseases = [d if isinstance(d, DiseaseConfig) else DiseaseConfig(**d) for d in self.diseases]
        self.shape = [int(s) for s in self.shape]

    def validate(self) -> None:
        if self.n_hc_train < 1 or self.n_hc_test < 0:
            raise GenerationError("cohort sizes must be positive")
        if not self.age_min < self.age_max:
            raise GenerationError("age_min must be below age_max")
        if self.hc_jitter < 0 or not 0.0 <= self.network_share <= 1.0:
            raise GenerationError("hc_jitter must be >= 0 and network_share in [0, 1]")
        if self.decay_rate <= 0:
            raise GenerationError("decay_rate must be positive")
        if self.noise_sigma < 0 or self.anatomy_sigma < 0:
            raise GenerationError("noise levels must be non-negative")
        names = [d.name for d in self.diseases]
        if len(set(names)) != len(names):
            raise GenerationError("duplicate disease names")
        for d in self.diseases:
            DiseasePrior(d.name, tuple(d.regions)).validate(self.n_regions)
            if d.n < 0:
                raise GenerationError(f"disease {d.name!r}: negative cohort size")

    def intensity_params(self) -> IntensityParams:
        return IntensityParams(self.base_intensity, self.decay_rate, self.noise_sigma, self.anatomy_sigma)


@dataclass(frozen=True)
class IntensityParams:
    base_intensity: float = 1.0
    decay_rate: float = 0.01
    noise_sigma: float = 0.05
    anatomy_sigma: float = 0.0

    def mean_intensity(self, age):
        """Expected region intensity for a planted age (anatomy offset averaged out)."""
        return self.base_intensity - self.decay_rate * np.asarray(age, dtype=np.float64)

    def age_from_intensity(self, intensity):
        return (self.base_intensity - np.asarray(intensity, dtype=np.float64)) / self.decay_rate


@dataclass
class CohortManifest:
    subjects: list[SubjectRecord]
    shape: tuple[int, int, int]
    n_regions: int
    n_networks: int
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise GenerationError("duplicate subject ids")
        for s in self.subjects:
            if s.split == TRAIN and not s.is_hc:
                raise GenerationError(f"non-HC subject {s.id} in the training split")

    def select(self, *, split: str | None = None, cohort: str | None = None) -> list[SubjectRecord]:
        return [
            s
            for s in self.subjects
            if (split is None or s.split == split) and (cohort is None or s.cohort == cohort)
        ]

    def ids(self, **kw) -> list[str]:
        return [s.id for s in self.select(**kw)]

    def record(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)

    def cohorts(self) -> list[str]:
        seen: list[str] = []
        for s in self.subjects:
            if s.cohort not in seen:
                seen.append(s.cohort)
        return seen

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.subjects:
            row = {"id": s.id, "age": s.chronological_age, "cohort": s.cohort, "split": s.split}
            for r, a in enumerate(s.planted_regional_age, start=1):
                row[f"planted_age_r{r}"] = float(a)
            rows.append(row)
        return pd.DataFrame(rows)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, meta: dict) -> CohortManifest:
        cols = [c for c in df.columns if c.startswith("planted_age_r")]
        cols.sort(key=lambda c: int(c[len("planted_age_r"):]))
        subjects = [
            SubjectRecord(
                str(row["id"]),
                float(row["age"]),
                str(row["cohort"]),
                str(row["split"]),
                row[cols].to_numpy(dtype=np.float64),
            )
            for _, row in df.iterrows()
        ]
        return cls(
            subjects,
            tuple(meta["shape"]),
            int(meta["n_regions"]),
            int(meta["n_networks"]),
            int(meta["seed"]),
            meta.get("params", {}),
        )


def brain_mask(shape) -> np.ndarray:
    """Axis-aligned ellipsoid spanning 80% of each dimension."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    acc = np.zeros(shape, dtype=np.float64)
    for g, n in zip(grids, shape):
        centre, semi = (n - 1) / 2.0, 0.4 * n
        acc += ((g - centre) / semi) ** 2
    return acc <= 1.0


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def make_synthetic_atlas(shape, n_regions: int, n_networks: int, seed: int) -> tuple[Atlas, NetworkMap]:
    """Voronoi atlas of seeded centroids inside the ellipsoidal brain mask.

    Centroids are refined with a few Lloyd iterations so region sizes are
    balanced. Regions are numbered along the principal axis of their centroids
    and networks are consecutive blocks of that ordering, so network k owns a
    contiguous id range and a spatially contiguous slab.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 8:
        raise GenerationError(f"shape must be 3-D with every dimension >= 8, got {shape}")
    if n_regions < 1 or not 1 <= n_networks <= n_regions:
        raise GenerationError(f"need R >= 1 and 1 <= K <= R (got R={n_regions}, K={n_networks})")
    mask = brain_mask(shape)
    points = np.argwhere(mask).astype(np.float64)
    if n_regions > len(points):
        raise GenerationError(f"R={n_regions} exceeds foreground voxel count {len(points)}")

    rng = np.random.default_rng(seed)
    centroids = points[rng.choice(len(points), size=n_regions, replace=False)]
    for _ in range(15):
        assign = _nearest(points, centroids)
        for r in range(n_regions):
            members = points[assign == r]
            if len(members):
                centroids[r] = members.mean(axis=0)
    assign = _nearest(points, centroids)
    sizes = np.bincount(assign, minlength=n_regions)
    for r in np.flatnonzero(sizes == 0):
        # Degenerate Lloyd outcome: steal the voxel farthest from its centroid.
        far = int(((points - centroids[assign]) ** 2).sum(-1).argmax())
        assign[far] = r
        centroids[r] = points[far]

    region_centres = np.stack([points[assign == r].mean(axis=0) for r in range(n_regions)])
    centred = region_centres - region_centres.mean(axis=0)
    if n_regions > 1:
        axis = np.linalg.svd(centred, full_matrices=False)[2][0]
        # SVD sign is arbitrary; fix it so the ordering is reproducible across LAPACKs.
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        order = np.lexsort((np.arange(n_regions), centred @ axis))
    else:
        order = np.arange(n_regions)
    new_id = np.empty(n_regions, dtype=np.int32)
    new_id[order] = np.arange(1, n_regions + 1)

    labels = np.zeros(shape, dtype=np.int32)
    idx = points.astype(np.int64)
    labels[idx[:, 0], idx[:, 1], idx[:, 2]] = new_id[assign]

    assignments = {}
    for k, block in enumerate(np.array_split(np.arange(1, n_regions + 1), n_networks), start=1):
        for r in block:
            assignments[int(r)] = k
    return Atlas(labels, n_regions), NetworkMap(assignments, n_networks)


def generate_subject_volume(atlas: Atlas, record: SubjectRecord, params: IntensityParams, seed) -> np.ndarray:
    """Render one subject; ``seed`` may be an int or a ``SeedSequence``."""
    planted = np.asarray(record.planted_regional_age, dtype=np.float64)
    if planted.shape != (atlas.n_regions,):
        raise GenerationError(f"{record.id}: planted ages must have length {atlas.n_regions}")
    rng = np.random.default_rng(seed)
    anatomy = rng.normal(0.0, 1.0, atlas.n_regions) * params.anatomy_sigma
    noise = rng.standard_normal(atlas.shape) * params.noise_sigma
    region_mean = np.concatenate([[0.0], params.mean_intensity(planted) + anatomy])
    fg = atlas.labels > 0
    vol = np.where(fg, region_mean[atlas.labels] + noise, 0.0)
    return vol.astype(np.float32)


def _draw_records(config: DatasetConfig, networks: NetworkMap) -> list[SubjectRecord]:
    rng = np.random.default_rng(config.seed)
    R, K = config.n_regions, config.n_networks
    net_half = config.network_share * config.hc_jitter
    reg_half = (1.0 - config.network_share) * config.hc_jitter
    net_of = np.array([networks.assignments[r] - 1 for r in range(1, R + 1)])

    def draw(prefix, n, cohort, split, offset=None):
        out = []
        for i in range(n):
            age = float(rng.uniform(config.age_min, config.age_max))
            net_dev = rng.uniform(-net_half, net_half, K)
            reg_dev = rng.uniform(-reg_half, reg_half, R)
            planted = age + net_dev[net_of] + reg_dev
            if offset is not None:
                planted = planted + offset
            out.append(SubjectRecord(f"{prefix}-{i:04d}", age, cohort, split, planted))
        return out

    records = draw("hc-train", config.n_hc_train, HC, TRAIN)
    records += draw("hc-test", config.n_hc_test, HC, TEST)
    for d in config.diseases:
        offset = np.zeros(R)
        offset[np.asarray(d.regions) - 1] = d.offset
        records += draw(d.name.lower(), d.n, disease_tag(d.name), TEST, offset)
    return records


def generate_cohort(config: DatasetConfig, out_dir: str | Path | None = None) -> tuple[CohortManifest, dict[str, np.ndarray]]:
    """Draw a cohort and render every subject; writes the dataset layout when ``out_dir`` is given."""
    config.validate()
    atlas, networks = make_synthetic_atlas(config.shape, config.n_regions, config.n_networks, config.seed)
    records = _draw_records(config, networks)
    params = asdict(config)
    manifest = CohortManifest(records, atlas.shape, config.n_regions, config.n_networks, config.seed, params)
    intensity = config.intensity_params()
    volumes = {
        rec.id: generate_subject_volume(atlas, rec, intensity, np.random.SeedSequence([config.seed, i]))
        for i, rec in enumerate(records)
    }
    priors = [DiseasePrior(d.name, tuple(d.regions)) for d in config.diseases]
    if out_dir is not None:
        write_dataset(out_dir, manifest, atlas, networks, priors, volumes)
    return manifest, volumes


def write_dataset(out_dir, manifest, atlas, networks, priors, volumes) -> None:
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GenerationError(f"cannot create output directory {out}: {exc}") from exc
    manifest.to_frame().to_csv(out / "manifest.csv", index=False)
    meta = {
        "shape": list(manifest.shape),
        "n_regions": manifest.n_regions,
        "n_networks": manifest.n_networks,
        "seed": manifest.seed,
        "params": manifest.params,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    write_volume(out / "atlas.vol", atlas.labels)
    (out / "atlas.json").write_text(
        json.dumps({"shape": list(atlas.shape), "n_regions": atlas.n_regions, "seed": manifest.seed}, indent=2)
    )
    (out / "networks.json").write_text(json.dumps(networks.to_json(), indent=2))
    (out / "priors.json").write_text(json.dumps({p.name: list(p.regions) for p in priors}, indent=2))
    for sid, vol in volumes.items():
        write_volume(out / "volumes" / f"{sid}.vol", vol)


@dataclass
class Dataset:
    """A generated dataset loaded back from disk."""

    root: Path
    manifest: CohortManifest
    atlas: Atlas
    networks: NetworkMap
    priors: dict[str, DiseasePrior]
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def volume(self, subject_id: str) -> np.ndarray:
        if subject_id not in self._cache:
            self._cache[subject_id] = read_volume(self.root / "volumes" / f"{subject_id}.vol")
        return self._cache[subject_id]

    def stack(self, ids) -> np.ndarray:
        return np.stack([self.volume(i) for i in ids])

    def ages(self, ids) -> np.ndarray:
        return np.array([self.manifest.record(i).chronological_age for i in ids])


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    manifest = CohortManifest.from_frame(pd.read_csv(root / "manifest.csv", dtype={"id": str}, float_precision="round_trip"), meta)
    atlas_meta = json.loads((root / "atlas.json").read_text())
    atlas = Atlas(read_volume(root / "atlas.vol"), int(atlas_meta["n_regions"]))
    networks = NetworkMap.from_json(json.loads((root / "networks.json").read_text()))
    priors = {name: DiseasePrior(name, tuple(regs)) for name, regs in json.loads((root / "priors.json").read_text()).items()}
    return Dataset(root, manifest, atlas, networks, priors)
