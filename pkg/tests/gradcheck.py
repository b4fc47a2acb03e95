"""Central finite-difference gradient checks for piecewise-smooth networks."""

import numpy as np
import torch
import torch.nn as nn


class KinkWatcher:
    """Records the on/off pattern of every ReLU during the last forward pass."""

    def __init__(self, *modules: nn.Module):
        self.patterns: list[torch.Tensor] = []
        self._handles = [
            m.register_forward_hook(self._hook) for mod in modules for m in mod.modules() if isinstance(m, nn.ReLU)
        ]

    def _hook(self, module, inputs, output):
        self.patterns.append((inputs[0] > 0).detach().reshape(-1))

    def snapshot(self) -> torch.Tensor:
        out = torch.cat(self.patterns) if self.patterns else torch.zeros(0, dtype=torch.bool)
        self.patterns = []
        return out

    def close(self):
        for h in self._handles:
            h.remove()


def _split(out):
    if isinstance(out, tuple):
        return out[0], out[1].detach().reshape(-1)
    return out, torch.zeros(0, dtype=torch.bool)


def check_gradients(loss_of, params, modules=(), n_probe=50, step=1e-4, rtol=1e-3, atol=1e-8, seed=0):
    """Compare autograd with ``(f(x+h) - f(x-h)) / 2h`` on ``n_probe`` random coordinates.

    ``loss_of()`` returns the loss, or ``(loss, kink_pattern)`` where the
    pattern is a bool tensor over the absolute-value kinks it passes through
    (e.g. residual signs). A probe whose +h and -h evaluations see different
    ReLU or kink patterns straddles a non-differentiable point and is
    redrawn; at least ``n_probe`` smooth probes must pass. Returns the number
    of redrawn probes.
    """
    watcher = KinkWatcher(*modules)
    try:
        loss, _ = _split(loss_of())
        grads = torch.autograd.grad(loss, params)
        sizes = np.array([p.numel() for p in params], dtype=np.float64)
        rng = np.random.default_rng(seed)
        checked = skipped = 0
        while checked < n_probe:
            if skipped > 10 * n_probe:
                raise AssertionError("too many probes straddle kinks")
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            p, g = params[k], grads[k]
            i = int(rng.integers(p.numel()))
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                watcher.snapshot()
                p.view(-1)[i] = orig + step
                up, up_kinks = _split(loss_of())
                up_relu = watcher.snapshot()
                p.view(-1)[i] = orig - step
                down, down_kinks = _split(loss_of())
                down_relu = watcher.snapshot()
                p.view(-1)[i] = orig
            if not (torch.equal(up_relu, down_relu) and torch.equal(up_kinks, down_kinks)):
                skipped += 1
                continue
            fd = (up.item() - down.item()) / (2 * step)
            an = g.view(-1)[i].item()
            assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol, (k, i, fd, an)
            checked += 1
        return skipped
    finally:
        watcher.close()
