"""Warm-up, cross-selection epochs and ensemble evaluation.

One run looks like::

    state = init_state(cfg, dataset)
    cc_warmup(state, dataset, cfg.warmup_epochs, cfg, test=test)
    for _ in range(cfg.epochs):
        train_epoch(state, dataset, cfg, test=test)

:func:`run` wires the same steps together and writes the artifacts. Ground
truth enters only through the optional ``truth`` argument, which is used for
nothing but the logged selection accuracy.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, augment_batch
from .comix import comix_loss
from .data import HiddenTruth, LabeledSplit, PLLDataset
from .errors import DivergenceError
from .memory_bank import MemoryBank
from .models import (
    OptimizerConfig,
    build_reference_model,
    make_optimizer,
    predict_proba,
    save_checkpoint,
    scaled_milestones,
    step,
)
from .selection import SelectedSet, SelectionConfig, select, selection_log_row, selection_stats, write_selection_log

log = logging.getLogger(__name__)

REG_SCOPES = ("all", "unselected", "none")
LAMBDA_MODES = ("dynamic", "fixed")
METHODS = ("crosel", "cc")

METRIC_FIELDS = (
    "epoch", "model_id", "test_acc", "ensemble_acc", "s_ratio", "s_acc",
    "lambda_d", "mean_L_l", "mean_L_cr", "lr",
)

# augmentation stream roles
_LABELED, _WEAK, _STRONG, _WARMUP = range(4)


@dataclass
class TrainConfig:
    q: float = 0.3
    gamma: float = 0.9
    t: int = 3
    temperature: float = 0.5
    alpha: float = 0.75
    lambda_cr: float = 4.0
    lambda_mode: str = "dynamic"
    epochs: int = 30
    warmup_epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    reg_scope: str = "all"
    sel_aug: str = "weak"
    dual: bool = True
    method: str = "crosel"
    arch: str = "mlp"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hflip: bool = True

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.reg_scope not in REG_SCOPES:
            raise ValueError(f"reg_scope must be one of {REG_SCOPES}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if self.sel_aug not in ("none", "weak", "strong"):
            raise ValueError("sel_aug must be none, weak or strong")
        if self.t < 2:
            raise ValueError(f"t must be at least 2, got {self.t}")
        if self.method == "crosel" and self.warmup_epochs < self.t:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} < t={self.t}: the memory bank would not be full")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs, warmup_epochs and batch_size must be non-negative (batch_size >= 1)")
        if not 0 < self.gamma < 1 or self.temperature <= 0 or self.alpha <= 0 or self.lambda_cr < 0:
            raise ValueError("need 0 < gamma < 1, temperature > 0, alpha > 0, lambda_cr >= 0")
        return self

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.epochs


@dataclass
class TrainState:
    models: list
    banks: list[MemoryBank]
    optimizers: list
    schedulers: list
    epoch: int = 0
    metrics: list[dict] = field(default_factory=list)
    selection_log: list[list[str]] = field(default_factory=list)
    selections: list[tuple[int, int, SelectedSet]] = field(default_factory=list)
    iterations: Counter = field(default_factory=Counter)
    pushes: Counter = field(default_factory=Counter)
    # (trained model, model whose bank produced the labeled batch) -> batches
    provenance: Counter = field(default_factory=Counter)


def init_state(cfg: TrainConfig, dataset: PLLDataset) -> TrainState:
    n_models = 2 if cfg.dual else 1
    input_shape = dataset.features.shape[1:]
    models, opts, scheds = [], [], []
    opt_cfg = OptimizerConfig(cfg.lr, cfg.momentum, cfg.weight_decay, scaled_milestones(cfg.total_epochs))
    for m in range(n_models):
        model = build_reference_model(cfg.arch, dataset.k, input_shape, seed=cfg.seed * 1000 + m)
        model.train()
        opt, sched = make_optimizer(model, opt_cfg)
        models.append(model)
        opts.append(opt)
        scheds.append(sched)
    banks = [MemoryBank(cfg.t, dataset.n, dataset.k) for _ in range(n_models)]
    return TrainState(models, banks, opts, scheds)


def _rng(cfg: TrainConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def _policy(cfg: TrainConfig, kind: str, *stream: int) -> AugmentPolicy:
    return AugmentPolicy(kind, seed=(cfg.seed, *stream), hflip=cfg.hflip)


def _tensor(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


# --------------------------------------------------------------------------
# losses


def cc_loss(logits: torch.Tensor, candidates) -> torch.Tensor:
    """Mean of ``-log sum_{j in S} softmax_j(f(x))``."""
    mask = torch.as_tensor(candidates, dtype=torch.bool)
    log_p = F.log_softmax(logits, dim=1).masked_fill(~mask, float("-inf"))
    return -torch.logsumexp(log_p, dim=1).mean()


def selected_loss(model, features, labels) -> torch.Tensor:
    """Cross-entropy of ``model`` on (already augmented) selected examples."""
    return F.cross_entropy(model(_tensor(features)), torch.as_tensor(labels, dtype=torch.long))


def lambda_d(r_s: float, lambda_cr: float, mode: str = "dynamic") -> float:
    if not 0.0 <= r_s <= 1.0:
        raise ValueError(f"selection ratio must lie in [0, 1], got {r_s}")
    if mode == "fixed":
        return lambda_cr
    if mode != "dynamic":
        raise ValueError(f"unknown lambda mode {mode!r}")
    return (1.0 - r_s) * lambda_cr


def total_loss(l_l, l_cr, weight: float):
    return l_l + weight * l_cr


def _check_finite(loss: torch.Tensor, what: str, epoch: int):
    if not torch.isfinite(loss):
        raise DivergenceError(f"{what} became {loss.item()} at epoch {epoch}")


# --------------------------------------------------------------------------
# prediction


def ensemble_predict(models, x) -> tuple[np.ndarray, np.ndarray]:
    """Average of the models' softmax outputs, and its argmax (ties to the lowest id)."""
    probs = np.mean([predict_proba(m, x) for m in models], axis=0)
    return probs, probs.argmax(axis=1)


def evaluate(models, test: LabeledSplit) -> float:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    _, labels = ensemble_predict(models, test.features)
    return float((labels == test.labels).mean())


def _push_banks(state: TrainState, dataset: PLLDataset):
    # unaugmented inference pass
    for m, (model, bank) in enumerate(zip(state.models, state.banks)):
        probs = predict_proba(model, dataset.features)
        if not np.isfinite(probs).all():
            raise DivergenceError(f"model {m + 1} produced non-finite predictions at epoch {state.epoch}")
        bank.push(probs, epoch=state.epoch)
        state.pushes[m] += 1


def _record(state, test, lr_used, extra):
    accs = [evaluate([m], test) for m in state.models] if test is not None else [None] * len(state.models)
    ens = evaluate(state.models, test) if test is not None else None
    for m, acc in enumerate(accs):
        row = {"epoch": state.epoch, "model_id": m + 1, "test_acc": acc, "ensemble_acc": ens, "lr": lr_used[m]}
        row.update(extra[m])
        state.metrics.append(row)


# --------------------------------------------------------------------------
# epochs


def cc_warmup(state: TrainState, dataset: PLLDataset, warmup_epochs: int, cfg: TrainConfig, test=None) -> TrainState:
    """Train every model with the CC loss for ``warmup_epochs`` epochs on weak
    views, pushing each model's predictions into its bank after every epoch."""
    n, bs = dataset.n, cfg.batch_size
    for _ in range(warmup_epochs):
        state.epoch += 1
        lr_used, extra = [], []
        for m, (model, opt) in enumerate(zip(state.models, state.optimizers)):
            order = _rng(cfg, m, state.epoch, _WARMUP).permutation(n)
            policy = _policy(cfg, "weak", m, state.epoch, _WARMUP)
            lr_used.append(opt.param_groups[0]["lr"])
            losses = []
            for i in range(math.ceil(n / bs)):
                idx = order[i * bs:(i + 1) * bs]
                x = augment_batch(dataset.features[idx], idx, policy)
                loss = cc_loss(model(_tensor(x)), dataset.candidates[idx])
                _check_finite(loss, "CC loss", state.epoch)
                opt.zero_grad()
                loss.backward()
                step(model, opt)
                losses.append(loss.item())
                state.iterations[m] += 1
            state.schedulers[m].step()
            extra.append({"mean_L_l": float(np.mean(losses))})
        _push_banks(state, dataset)
        _record(state, test, lr_used, extra)
    return state


def _labeled_batches(sel: SelectedSet, iters: int, bs: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Row positions into ``sel`` for each iteration; drawn with replacement
    when the selection is smaller than the epoch's demand."""
    if len(sel) == 0:
        return []
    demand = iters * bs
    if len(sel) >= demand:
        pos = rng.permutation(len(sel))[:demand]
    else:
        pos = rng.integers(0, len(sel), size=demand)
    return [pos[i * bs:(i + 1) * bs] for i in range(iters)]


def train_epoch(
    state: TrainState,
    dataset: PLLDataset,
    cfg: TrainConfig,
    test: LabeledSplit | None = None,
    truth: HiddenTruth | None = None,
) -> TrainState:
    """One cross-selection epoch.

    Both selections are frozen from the banks before any update. Model ``m``
    then takes ``ceil(n / batch_size)`` steps, each pairing a labeled batch
    from the other model's selection (its own when ``cfg.dual`` is off) with a
    batch of the full data for the co-mix term. Finally every model pushes an
    unaugmented inference pass into its own bank.
    """
    n, bs = dataset.n, cfg.batch_size
    n_models = len(state.models)
    state.epoch += 1
    sel_cfg = SelectionConfig(cfg.gamma, cfg.t)
    sels = [select(bank, dataset, sel_cfg, epoch=state.epoch) for bank in state.banks]
    stats = []
    for m, sel in enumerate(sels):
        state.selections.append((state.epoch, m + 1, sel))
        st = selection_stats(sel, truth) if truth is not None else None
        stats.append(st)
        if st is not None:
            state.selection_log.append(selection_log_row(state.epoch, m + 1, st))
    if all(len(s) == 0 for s in sels):
        log.warning("epoch %d: nothing selected, training on the regularizer only", state.epoch)

    iters = math.ceil(n / bs)
    lr_used, extra = [], []
    for m, (model, opt) in enumerate(zip(state.models, state.optimizers)):
        source = (1 - m) if n_models == 2 else m
        sel = sels[source]
        r_s = len(sel) / n
        weight = lambda_d(r_s, cfg.lambda_cr, cfg.lambda_mode) if cfg.reg_scope != "none" else 0.0
        in_sel = np.zeros(n, dtype=bool)
        in_sel[sel.indices] = True

        order = _rng(cfg, m, state.epoch, _WEAK).permutation(n)
        labeled = _labeled_batches(sel, iters, bs, _rng(cfg, m, state.epoch, _LABELED))
        mix_rng = _rng(cfg, m, state.epoch, _STRONG)
        sel_policy = _policy(cfg, cfg.sel_aug, m, state.epoch, _LABELED)
        weak = _policy(cfg, "weak", m, state.epoch, _WEAK)
        strong = _policy(cfg, "strong", m, state.epoch, _STRONG)
        lr_used.append(opt.param_groups[0]["lr"])
        l_ls, l_crs = [], []
        for i in range(iters):
            l_l = torch.zeros(())
            if labeled:
                rows = sel.indices[labeled[i]]
                x = augment_batch(dataset.features[rows], rows, sel_policy)
                l_l = selected_loss(model, x, sel.labels[labeled[i]])
                state.provenance[(m + 1, source + 1)] += 1
                l_ls.append(l_l.item())

            l_cr = torch.zeros(())
            if cfg.reg_scope != "none":
                idx = order[i * bs:(i + 1) * bs]
                if cfg.reg_scope == "unselected":
                    idx = idx[~in_sel[idx]]
                if len(idx):
                    xw = augment_batch(dataset.features[idx], idx, weak)
                    xs = augment_batch(dataset.features[idx], idx, strong)
                    l_cr, _ = comix_loss(
                        model, _tensor(xw), _tensor(xs), dataset.candidates[idx], cfg.temperature, cfg.alpha, mix_rng
                    )
                    l_crs.append(l_cr.item())

            loss = total_loss(l_l, l_cr, weight)
            state.iterations[m] += 1
            if not loss.requires_grad:
                continue
            _check_finite(loss, "training loss", state.epoch)
            opt.zero_grad()
            loss.backward()
            step(model, opt)
        state.schedulers[m].step()
        own = stats[m]
        extra.append({
            "s_ratio": len(sels[m]) / n,
            "s_acc": None if own is None else own.accuracy,
            "lambda_d": weight,
            "mean_L_l": float(np.mean(l_ls)) if l_ls else None,
            "mean_L_cr": float(np.mean(l_crs)) if l_crs else None,
        })
        if not l_ls:
            log.info("epoch %d model %d: empty selection, labeled loss skipped", state.epoch, m + 1)
    _push_banks(state, dataset)
    _record(state, test, lr_used, extra)
    return state


# --------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    state: TrainState
    final_accuracy: float | None
    wall_clock: float


def train(cfg: TrainConfig, dataset: PLLDataset, test: LabeledSplit | None = None, truth: HiddenTruth | None = None) -> RunResult:
    cfg.validate()
    torch.use_deterministic_algorithms(True)
    start = time.perf_counter()
    state = init_state(cfg, dataset)
    if cfg.method == "cc":
        cc_warmup(state, dataset, cfg.total_epochs, cfg, test=test)
    else:
        cc_warmup(state, dataset, cfg.warmup_epochs, cfg, test=test)
        for _ in range(cfg.epochs):
            train_epoch(state, dataset, cfg, test=test, truth=truth)
            log.info("epoch %d: %s", state.epoch, _short(state.metrics[-1]))
    acc = evaluate(state.models, test) if test is not None else None
    return RunResult(state, acc, time.perf_counter() - start)


def _short(row):
    return " ".join(f"{k}={_fmt(row.get(k))}" for k in ("ensemble_acc", "s_ratio", "s_acc", "lambda_d"))


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.6f}"


def write_metrics(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in metrics:
            w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (None if v == "NA" else (int(v) if k in ("epoch", "model_id") else float(v))) for k, v in r.items()})
    return out


def summarize(result: RunResult, cfg: TrainConfig) -> dict:
    rows = result.state.metrics
    ens = [r["ensemble_acc"] for r in rows if r["ensemble_acc"] is not None]
    last_epoch = result.state.epoch
    final_rows = [r for r in rows if r["epoch"] == last_epoch]
    return {
        "config": asdict(cfg),
        "final": {
            "ensemble_acc": result.final_accuracy,
            "s_ratio": [r.get("s_ratio") for r in final_rows],
            "s_acc": [r.get("s_acc") for r in final_rows],
        },
        "best": {"ensemble_acc": max(ens) if ens else None},
        "epochs_run": last_epoch,
        "wall_clock_seconds": result.wall_clock,
    }


def write_artifacts(result: RunResult, cfg: TrainConfig, out_dir) -> Path:
    """metrics.csv, selection.csv, summary.json, final checkpoints and banks."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = result.state
    write_metrics(out / "metrics.csv", state.metrics)
    write_selection_log(out / "selection.csv", state.selection_log)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for m, (model, bank) in enumerate(zip(state.models, state.banks)):
        save_checkpoint(model, ckpt, m + 1, state.epoch)
        bank.save(ckpt / f"mb_{m + 1}.bin")
    (out / "summary.json").write_text(json.dumps(summarize(result, cfg), indent=2) + "\n")
    return out


def config_from_dict(values: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)
