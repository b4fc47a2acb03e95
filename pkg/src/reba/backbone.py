"""Regressor contract, the reference 3D CNN and the shared training loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .io import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)


class FrozenModelError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    """AdamW + cosine annealing, stepped once per epoch."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 60
    batch_size: int = 4
    lr_min: float = 0.0

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("lr, weight_decay and lr_min must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * epoch / self.epochs))


class AgeHead(nn.Module):
    """Linear readout in years: ``bias + scale * (w . x)``.

    ``scale`` is a fixed buffer (typically the training-age spread) so that a
    unit-scale weight vector spans the age range; with ``w = 0`` the output is
    exactly ``bias``.
    """

    def __init__(self, in_features: int, bias: float = 0.0, scale: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(in_features))
        self.bias = nn.Parameter(torch.tensor(float(bias)))
        self.register_buffer("scale", torch.tensor(float(scale)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bias + self.scale * (x @ self.weight)


class RegressorModel(nn.Module):
    """Interface shared by the Teacher and the Student's main block.

    ``predict_age(x) == head(embed(x))``; ``x`` is a batch ``(B, D, H, W)`` of raw
    intensities and normalisation is the model's own business.
    """

    embedding_dim: int

    def __init__(self):
        super().__init__()
        self._frozen = False

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def head(self, e: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    def predict_age(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict_age(x)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> RegressorModel:
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.eval()
        self._frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen model stays in eval mode even when nested in a trainable parent
        return super().train(mode and not self._frozen)


class ReferenceBackbone(RegressorModel):
    """Three stride-2 conv stages, global average pooling and a 2-layer MLP.

    Inputs are standardised with fixed cohort-level constants
    ``(x - input_mean) / input_std`` before the first convolution.
    """

    def __init__(
        self,
        shape: Sequence[int],
        d_m: int = 32,
        channels: Sequence[int] = (8, 16, 16),
        hidden: int = 32,
        input_mean: float = 0.0,
        input_std: float = 1.0,
        age_bias: float = 50.0,
        age_scale: float = 1.0,
    ):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = hidden
        self.embedding_dim = d_m
        self.register_buffer("input_mean", torch.tensor(float(input_mean)))
        self.register_buffer("input_std", torch.tensor(float(input_std)))
        layers: list[nn.Module] = []
        c_in = 1
        for c in self.channels:
            layers += [nn.Conv3d(c_in, c, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.mlp = nn.Sequential(nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, d_m))
        self.age_head = AgeHead(d_m, bias=age_bias, scale=age_scale)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.input_mean) / self.input_std
        h = self.features(x.unsqueeze(1))
        return self.mlp(h.mean(dim=(2, 3, 4)))

    def head(self, e: torch.Tensor) -> torch.Tensor:
        return self.age_head(e)

    def descriptor(self) -> dict:
        return {
            "kind": "reference",
            "shape": list(self.shape),
            "d_m": self.embedding_dim,
            "channels": list(self.channels),
            "hidden": self.hidden,
            "input_mean": float(self.input_mean),
            "input_std": float(self.input_std),
            "age_bias": float(self.age_head.bias.detach()),
            "age_scale": float(self.age_head.scale),
        }


def reference_backbone(shape, d_m: int = 32, seed: int = 0, **kwargs) -> ReferenceBackbone:
    if d_m < 4:
        raise ValueError("d_m must be >= 4")
    channels = kwargs.get("channels", (8, 16, 16))
    min_side = 2 ** len(channels)
    if len(shape) != 3 or min(shape) < min_side:
        raise ValueError(f"shape {tuple(shape)} too small for {len(channels)} stride-2 stages (need >= {min_side})")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReferenceBackbone(shape, d_m, **kwargs)


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1).double() for p in model.parameters()]).numpy()


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # torch.abs has subgradient 0 at the kink
    return (pred - target).abs().mean()


LossFn = Callable[[nn.Module, torch.Tensor, torch.Tensor], "torch.Tensor | tuple[torch.Tensor, dict]"]


def train_regressor(
    model: nn.Module,
    dataset: tuple[torch.Tensor, torch.Tensor],
    loss_fn: LossFn,
    optimizer_config: OptimizerConfig,
    seed: int,
    params: Sequence[nn.Parameter] | None = None,
) -> tuple[nn.Module, list[dict]]:
    """Mini-batch AdamW with per-epoch cosine annealing.

    ``dataset`` is an ``(inputs, targets)`` pair indexed along dim 0; shuffling
    uses its own generator seeded with ``seed``. ``loss_fn(model, xb, yb)``
    returns a scalar loss or ``(loss, components)``. Returns the model and one
    dict per epoch with the mean loss (and mean components).
    """
    if getattr(model, "frozen", False):
        raise FrozenModelError("cannot train a frozen model")
    optimizer_config.validate()
    inputs, targets = dataset
    n = len(inputs)
    if n == 0:
        raise ValueError("empty training set")
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters")
    opt = torch.optim.AdamW(params, lr=optimizer_config.lr, weight_decay=optimizer_config.weight_decay)
    gen = torch.Generator().manual_seed(int(seed))
    history: list[dict] = []
    model.train()
    for epoch in range(optimizer_config.epochs):
        for group in opt.param_groups:
            group["lr"] = optimizer_config.lr_at(epoch)
        order = torch.randperm(n, generator=gen)
        totals: dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, n, optimizer_config.batch_size)):
            idx = order[start : start + optimizer_config.batch_size]
            out = loss_fn(model, inputs[idx], targets[idx])
            loss, parts = out if isinstance(out, tuple) else (out, {})
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            totals["loss"] = totals.get("loss", 0.0) + float(loss.detach())
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + float(v)
            n_batches += 1
        row = {"epoch": epoch, "lr": optimizer_config.lr_at(epoch)}
        row.update({k: v / n_batches for k, v in totals.items()})
        history.append(row)
        log.debug("epoch %d loss %.4f", epoch, row["loss"])
    model.eval()
    return model, history


def save_backbone(path, model: RegressorModel, extra: dict | None = None) -> str:
    descriptor = dict(model.descriptor())
    if extra:
        descriptor["extra"] = extra
    params = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    return write_checkpoint(path, descriptor, params)


def load_backbone(path, freeze: bool = True) -> tuple[RegressorModel, dict]:
    descriptor, params = read_checkpoint(path)
    if descriptor.get("kind") != "reference":
        raise ValueError(f"unknown backbone kind {descriptor.get('kind')!r}")
    model = ReferenceBackbone(
        descriptor["shape"],
        descriptor["d_m"],
        channels=descriptor["channels"],
        hidden=descriptor["hidden"],
    )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    if freeze:
        model.freeze()
    return model, descriptor
