"""Reference networks, SGD plumbing and flat-binary checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import DivergenceError


class MLP(nn.Module):
    def __init__(self, in_dim: int, k: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, k),
        )

    def forward(self, x):
        return self.net(x)


def _conv_block(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]


class SmallConvNet(nn.Module):
    """[conv3x3(32)-BN-ReLU]x2, maxpool, [conv3x3(64)-BN-ReLU]x2, maxpool, FC(128), FC(k)."""

    def __init__(self, in_shape: tuple[int, int, int], k: int):
        super().__init__()
        c, h, w = in_shape
        self.features = nn.Sequential(
            *_conv_block(c, 32), *_conv_block(32, 32), nn.MaxPool2d(2),
            *_conv_block(32, 64), *_conv_block(64, 64), nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(), nn.Linear(64 * (h // 4) * (w // 4), 128), nn.ReLU(), nn.Linear(128, k)
        )

    def forward(self, x):
        return self.classifier(self.features(x))


ARCHITECTURES = ("mlp", "small-cnn")


def build_reference_model(arch: str, k: int, input_shape, seed: int) -> nn.Module:
    input_shape = tuple(input_shape)
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if arch == "small-cnn" and len(input_shape) != 3:
        raise ValueError(f"small-cnn needs C x H x W input, got {input_shape}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if arch == "mlp":
            model = MLP(int(np.prod(input_shape)), k)
        else:
            model = SmallConvNet(input_shape, k)
    model.input_shape = input_shape
    return model


def forward(model: nn.Module, batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.array(batch, dtype=np.float32))
    batch = torch.as_tensor(batch, dtype=torch.float32)
    expected = getattr(model, "input_shape", None)
    if expected is not None and tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch has per-example shape {tuple(batch.shape[1:])}, model expects {expected}")
    return model(batch)


@torch.no_grad()
def predict_proba(model: nn.Module, features, batch_size: int = 512) -> np.ndarray:
    """Softmax outputs in eval mode; restores the previous mode afterwards."""
    was_training = model.training
    model.eval()
    out = [torch.softmax(forward(model, features[i:i + batch_size]), 1) for i in range(0, len(features), batch_size)]
    model.train(was_training)
    return torch.cat(out).double().numpy()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def estimate_flops(model: nn.Module, input_shape) -> int:
    """Multiply-accumulates of one forward pass over Conv2d and Linear layers."""
    total = 0

    def hook(mod, inp, out):
        nonlocal total
        if isinstance(mod, nn.Linear):
            total += mod.in_features * mod.out_features
        elif isinstance(mod, nn.Conv2d):
            total += out[0].numel() * (mod.in_channels // mod.groups) * math.prod(mod.kernel_size)

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.Linear, nn.Conv2d))]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, *input_shape))
    model.train(was_training)
    for h in handles:
        h.remove()
    return total


# --------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must be sorted, got {self.milestones}")


def scaled_milestones(total_epochs: int) -> list[int]:
    """The 100/150-of-200 schedule shape, rescaled to ``total_epochs``."""
    return sorted({max(1, int(total_epochs * 0.5)), max(1, int(total_epochs * 0.75))})


def make_optimizer(model: nn.Module, cfg: OptimizerConfig):
    """SGD with heavy-ball momentum and coupled weight decay.

    Per step: ``g <- g + wd * theta``; ``v <- mu * v + g``; ``theta <- theta - lr * v``
    (torch's convention). The learning rate drops by 10x at each milestone epoch.
    """
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=0.1)
    return opt, sched


def step(model: nn.Module, optimizer: torch.optim.Optimizer, grads=None) -> None:
    """Apply one optimizer step, optionally installing ``grads`` first.

    Raises :class:`DivergenceError` naming the offending parameter if any
    gradient is non-finite; the parameters are left untouched in that case.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    if grads is not None:
        grads = list(grads)
        if len(grads) != len(params):
            raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            p.grad = g.detach().clone()
    names = {id(p): name for name, p in model.named_parameters()}
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in parameter {names.get(id(p), '?')}")
    optimizer.step()


# --------------------------------------------------------------------------
# checkpoints: model_{id}_epoch{e}.bin + .json manifest


def save_checkpoint(model: nn.Module, directory, model_id: int, epoch: int) -> Path:
    """Concatenate every state-dict tensor (little-endian, native dtype, row-major)
    in state-dict order; the JSON manifest records name, dtype, shape and byte offset."""
    directory = Path(directory)
    path = directory / f"model_{model_id}_epoch{epoch}.bin"
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())
            entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"model_id": model_id, "epoch": epoch, "architecture": type(model).__name__, "tensors": entries}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(model: nn.Module, path) -> nn.Module:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.read_bytes()
    state = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    model.load_state_dict(state)
    return model
