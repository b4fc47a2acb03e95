"""Prompt-conditioned regional readout distilled from the Teacher's soft labels."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from .backbone import AgeHead, OptimizerConfig, RegressorModel, checksum, train_regressor
from .datagen import NetworkMap
from .io import read_checkpoint, write_checkpoint
from .parcellate import NoiseSpec, RegionMask
from .teacher import region_inputs

log = logging.getLogger(__name__)


class PromptBank(nn.Module):
    def __init__(self, n_regions: int, d_p: int = 16, init_std: float = 0.02):
        super().__init__()
        self.prompts = nn.Parameter(torch.randn(n_regions, d_p) * init_std)

    def forward(self) -> torch.Tensor:
        return self.prompts


class FiLMBlock(nn.Module):
    """2-layer MLP prompt -> (gamma, beta); gamma is the first ``d_m`` outputs.

    The output bias starts at (1, 0) and the output weights near zero, so the
    block initially passes embeddings through unchanged.
    """

    def __init__(self, d_p: int, d_m: int, hidden: int = 32):
        super().__init__()
        self.d_m = d_m
        self.net = nn.Sequential(nn.Linear(d_p, hidden), nn.ReLU(), nn.Linear(hidden, 2 * d_m))
        with torch.no_grad():
            self.net[2].weight.mul_(0.01)
            self.net[2].bias.copy_(torch.cat([torch.ones(d_m), torch.zeros(d_m)]))

    def forward(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(p)
        return out[..., : self.d_m], out[..., self.d_m :]


class AdapterHead(nn.Module):
    """Shared d_m -> hidden -> 1 readout in years."""

    def __init__(self, d_m: int, hidden: int = 32, bias: float = 50.0, scale: float = 1.0):
        super().__init__()
        self.fc = nn.Linear(d_m, hidden)
        self.act = nn.ReLU()
        self.out = AgeHead(hidden, bias=bias, scale=scale)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.out(self.act(self.fc(e)))


class StudentModel(nn.Module):
    """Frozen backbone embedding + prompts + FiLM + shared adapter.

    With ``use_film=False`` the modulation is the constant (gamma=1, beta=0),
    i.e. every region is read out by the same adapter.
    """

    def __init__(
        self,
        backbone: RegressorModel,
        n_regions: int,
        d_p: int = 16,
        hidden: int = 32,
        target_mean: float = 50.0,
        target_scale: float = 1.0,
        use_film: bool = True,
    ):
        super().__init__()
        if not backbone.frozen:
            raise ValueError("student requires a frozen backbone")
        d_m = backbone.embedding_dim
        self.backbone = backbone
        self.n_regions = n_regions
        self.d_p, self.hidden, self.use_film = d_p, hidden, use_film
        self.prompts = PromptBank(n_regions, d_p)
        self.film = FiLMBlock(d_p, d_m, hidden)
        self.adapter = AdapterHead(d_m, hidden, bias=target_mean, scale=target_scale)

    @property
    def frozen(self) -> bool:
        return False

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = list(self.adapter.parameters())
        if self.use_film:
            params = list(self.prompts.parameters()) + list(self.film.parameters()) + params
        return params

    def modulation(self) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.use_film:
            d_m = self.backbone.embedding_dim
            return torch.ones(self.n_regions, d_m), torch.zeros(self.n_regions, d_m)
        return self.film(self.prompts())

    def forward(self, e_main: torch.Tensor) -> torch.Tensor:
        """``e_main``: (B, R, d_m) region embeddings -> (B, R) regional ages."""
        gamma, beta = self.modulation()
        return self.adapter(gamma * e_main + beta)


def build_student(backbone, n_regions, d_p=16, hidden=32, target_mean=50.0, target_scale=1.0, use_film=True, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return StudentModel(backbone, n_regions, d_p, hidden, target_mean, target_scale, use_film)


@torch.no_grad()
def region_embeddings(backbone: RegressorModel, ids, volumes, masks: Sequence[RegionMask], noise: NoiseSpec) -> torch.Tensor:
    """Frozen-backbone embeddings of every (subject, region) input: (N, R, d_m)."""
    out = []
    for sid, vol in zip(ids, volumes):
        x = torch.from_numpy(region_inputs(vol, masks, noise, sid).astype(np.float32))
        out.append(backbone.embed(x))
    return torch.stack(out) if out else torch.zeros(0, len(masks), backbone.embedding_dim)


def student_forward(student: StudentModel, volume, masks, noise: NoiseSpec, key="") -> np.ndarray:
    e = region_embeddings(student.backbone, [key], [volume], masks, noise)
    with torch.no_grad():
        return student(e)[0].double().numpy()


def distill_loss(pred, soft):
    """Mean absolute deviation from the soft labels over the subject x region grid."""
    if tuple(pred.shape) != tuple(soft.shape):
        raise ValueError(f"grid mismatch: {tuple(pred.shape)} vs {tuple(soft.shape)}")
    if isinstance(pred, torch.Tensor):
        return (pred - soft).abs().mean()
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(soft, np.float64))))


def _network_index(network_map: NetworkMap, n_regions: int) -> list[list[int]]:
    if network_map.n_regions != n_regions:
        raise ValueError(f"network map covers {network_map.n_regions} regions, predictions have {n_regions}")
    groups = [[r - 1 for r in g] for g in network_map.groups()]
    if any(not g for g in groups):
        raise ValueError("empty network")
    return groups


def func_consistency_loss(pred, network_map: NetworkMap, detach_mean: bool = False):
    """Per subject, per network: mean |pred - network mean|; summed over networks, averaged over subjects."""
    groups = _network_index(network_map, pred.shape[1])
    if not isinstance(pred, torch.Tensor):
        pred = np.asarray(pred, np.float64)
        total = sum(np.abs(pred[:, g] - pred[:, g].mean(axis=1, keepdims=True)).mean(axis=1) for g in groups)
        return float(np.mean(total))
    total = 0.0
    for g in groups:
        sub = pred[:, g]
        mu = sub.mean(dim=1, keepdim=True)
        if detach_mean:
            mu = mu.detach()
        total = total + (sub - mu).abs().mean(dim=1)
    return total.mean()


def student_objective(zeta: float, network_map: NetworkMap, detach_mean: bool = False):
    def loss_fn(model, eb, yb):
        pred = model(eb)
        l_dist = distill_loss(pred, yb)
        l_func = func_consistency_loss(pred, network_map, detach_mean)
        total = l_dist + zeta * l_func
        return total, {"l_dist": l_dist.detach(), "l_func": l_func.detach()}

    return loss_fn


def train_student(
    student: StudentModel,
    embeddings: torch.Tensor,
    targets: np.ndarray,
    network_map: NetworkMap,
    zeta: float,
    optimizer_config: OptimizerConfig,
    seed: int,
    detach_mean: bool = False,
) -> tuple[StudentModel, list[dict]]:
    """Minimise L_dist + zeta * L_func over prompts, FiLM and adapter only."""
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    if not student.backbone.frozen:
        raise ValueError("student backbone must stay frozen")
    before = checksum(student.backbone)
    y = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    model, history = train_regressor(
        student,
        (embeddings, y),
        student_objective(zeta, network_map, detach_mean),
        optimizer_config,
        seed,
        params=student.trainable_parameters(),
    )
    if any(p.grad is not None for p in student.backbone.parameters()):
        raise RuntimeError("gradient reached frozen backbone parameters")
    if checksum(student.backbone) != before:
        raise RuntimeError("backbone parameters changed during student training")
    return model, history


@torch.no_grad()
def predict_cohort(student: StudentModel, embeddings: torch.Tensor) -> np.ndarray:
    return student(embeddings).double().numpy()


def prediction_frame(records, reba: np.ndarray) -> pd.DataFrame:
    df = pd.DataFrame(
        {
            "id": [r.id for r in records],
            "age": [r.chronological_age for r in records],
            "cohort": [r.cohort for r in records],
            "split": [r.split for r in records],
        }
    )
    for r in range(reba.shape[1]):
        df[f"reba_r{r + 1}"] = reba[:, r]
    return df


def save_student(path, student: StudentModel, backbone_hash: str, extra: dict | None = None) -> str:
    descriptor = {
        "kind": "student",
        "n_regions": student.n_regions,
        "d_p": student.d_p,
        "hidden": student.hidden,
        "use_film": student.use_film,
        "backbone_sha256": backbone_hash,
    }
    if extra:
        descriptor["extra"] = extra
    params = {k: v.detach().numpy() for k, v in student.state_dict().items() if not k.startswith("backbone.")}
    return write_checkpoint(path, descriptor, params)


def load_student(path, backbone: RegressorModel, backbone_hash: str | None = None) -> StudentModel:
    descriptor, params = read_checkpoint(path)
    if backbone_hash is not None and descriptor["backbone_sha256"] != backbone_hash:
        raise ValueError("student checkpoint refers to a different backbone")
    student = StudentModel(backbone, descriptor["n_regions"], descriptor["d_p"], descriptor["hidden"], use_film=descriptor["use_film"])
    state = {k: torch.from_numpy(v) for k, v in params.items()}
    state.update({f"backbone.{k}": v for k, v in backbone.state_dict().items()})
    student.load_state_dict(state)
    student.eval()
    return student
