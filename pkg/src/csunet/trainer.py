"""Epoch loop: seeded shuffling and augmentation, AdamW, validation, checkpoints.

Every random draw of epoch ``e`` comes from ``default_rng([seed, e])``, so a
run resumed from the checkpoint written after epoch ``e - 1`` continues
bit-for-bit like an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import config as config_io
from .config import RunConfig
from .data import SegSample, augment, load_directory, synth_dataset
from .losses import combined_loss
from .metrics import aggregate, case_metrics
from .network import ModelConfig, forward, init_params
from .optim import OptimState, adamw_step, lr_schedule, zero_grad
from .serialization import FormatError, load_checkpoint, save_checkpoint
from .tensor import ConfigError, Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
CONFIG_SNAPSHOT = "config.ini"


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: OptimState
    history: list[dict]
    best_dsc: float
    run_dir: Path


def build_datasets(run: RunConfig) -> tuple[list[SegSample], list[SegSample]]:
    d, m = run.data, run.model
    if d.source == "synthetic":
        size = m.input_size[0]
        train = synth_dataset(d.data_seed, d.train_samples, size, m.num_classes)
        val = synth_dataset(d.data_seed + 1, d.val_samples, size, m.num_classes)
        return train, val
    root = Path(d.path)
    return load_directory(root / "train"), load_directory(root / "val")


def batches(samples: Sequence[SegSample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        yield np.stack([s.image for s in chunk]), np.stack([s.mask for s in chunk])


def predict_masks(params: Mapping[str, Tensor], cfg: ModelConfig, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(Tensor(images[i : i + batch_size]), params, cfg)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    samples: Sequence[SegSample],
    batch_size: int = 8,
    percentile: float = 95.0,
) -> dict:
    """Per-class and mean DSC / HD over ``samples``; averages run over cases in order."""
    cases = []
    for images, masks in batches(samples, batch_size):
        preds = predict_masks(params, cfg, images, batch_size)
        cases.extend(case_metrics(p, t, cfg.num_classes, percentile) for p, t in zip(preds, masks))
    return aggregate(cases)


def _check_compat(manifest: Mapping, cfg: ModelConfig) -> None:
    saved = ModelConfig.from_dict(manifest["model"])
    if saved != cfg:
        diff = [f.name for f in dataclasses.fields(cfg) if getattr(saved, f.name) != getattr(cfg, f.name)]
        raise FormatError(f"checkpoint model config differs in {diff}")


def save_training_state(path, params, state: OptimState, run: RunConfig, epoch: int, best_dsc: float) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in params.items():
        tensors[f"params.{name}"] = p.data
    for name in params:
        if name in state.exp_avg:
            tensors[f"optim.exp_avg.{name}"] = state.exp_avg[name]
            tensors[f"optim.exp_avg_sq.{name}"] = state.exp_avg_sq[name]
    meta = {
        "model": run.model.to_dict(),
        "config": config_io.dumps(run),
        "epoch": epoch,
        "seed": run.train.seed,
        "best_dsc": best_dsc,
        "optim": {
            "step": state.step,
            "lr": state.lr,
            "betas": list(state.betas),
            "eps": state.eps,
            "weight_decay": state.weight_decay,
        },
    }
    save_checkpoint(path, tensors, meta)


def load_params(path, cfg: ModelConfig | None = None) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    """Parameters and model config stored in a checkpoint."""
    tensors, manifest = load_checkpoint(path)
    saved = ModelConfig.from_dict(manifest["model"])
    if cfg is not None:
        _check_compat(manifest, cfg)
    params = OrderedDict(
        (k[len("params.") :], Tensor(v, name=k[len("params.") :])) for k, v in tensors.items() if k.startswith("params.")
    )
    return params, saved, manifest


def _restore(path, run: RunConfig):
    tensors, manifest = load_checkpoint(path)
    _check_compat(manifest, run.model)
    params, _, _ = load_params(path)
    o = manifest["optim"]
    state = OptimState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], weight_decay=o["weight_decay"], step=o["step"])
    for k, v in tensors.items():
        if k.startswith("optim.exp_avg_sq."):
            state.exp_avg_sq[k[len("optim.exp_avg_sq.") :]] = v
        elif k.startswith("optim.exp_avg."):
            state.exp_avg[k[len("optim.exp_avg.") :]] = v
    return params, state, manifest["epoch"], manifest["best_dsc"]


def train(
    run: RunConfig,
    train_set: Sequence[SegSample],
    val_set: Sequence[SegSample],
    run_dir: str | os.PathLike,
    *,
    resume: str | os.PathLike | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train per ``run``; writes metrics log, last/best checkpoints and a config snapshot to ``run_dir``.

    ``stop_after`` ends the loop after that many epochs (counted from 0)
    without changing the schedule; ``resume`` continues from a checkpoint.
    """
    run.validate()
    cfg, tc = run.model, run.train
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / CONFIG_SNAPSHOT).write_text(config_io.dumps(run))
    except OSError as e:
        raise OSError(f"cannot prepare run directory {run_dir}: {e}") from e
    log_path = run_dir / METRICS_LOG

    if resume is not None:
        params, state, start, best = _restore(resume, run)
    else:
        params = init_params(cfg, seed=tc.seed)
        state = OptimState(lr=tc.lr, weight_decay=tc.weight_decay)
        start, best = 0, -1.0
        log_path.write_text("")
    for p in params.values():
        p.requires_grad = True

    end = tc.epochs if stop_after is None else min(tc.epochs, stop_after)
    history = []
    n = len(train_set)
    for epoch in range(start, end):
        rng = np.random.default_rng([tc.seed, epoch])
        lr = lr_schedule(epoch, tc.epochs, tc.lr, tc.warmup_epochs)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, tc.batch_size):
            imgs, masks = [], []
            for j in order[i : i + tc.batch_size]:
                im, mk = augment(train_set[j].image, train_set[j].mask, rng, tc.augment_flip, tc.augment_rotate)
                imgs.append(im)
                masks.append(mk)
            logits = forward(Tensor(np.stack(imgs)), params, cfg)
            loss = combined_loss(logits, np.stack(masks), tc.ce_weight)
            loss.backward()
            adamw_step(params, state, lr)
            zero_grad(params)
            losses.append(float(loss.data))
        metrics = evaluate(params, cfg, val_set, percentile=tc.hd_percentile)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_dsc": metrics["dsc"],
            "val_mean_dsc": metrics["mean_dsc"],
            "val_hd": metrics["hd95"],
            "val_mean_hd": metrics["mean_hd95"],
        }
        history.append(record)
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        if metrics["mean_dsc"] > best:
            best = metrics["mean_dsc"]
            save_training_state(run_dir / BEST_CKPT, params, state, run, epoch + 1, best)
        save_training_state(run_dir / LAST_CKPT, params, state, run, epoch + 1, best)
        log.info("epoch %d lr %.2e loss %.4f val dsc %.4f hd %.2f", epoch, lr, record["train_loss"],
                 metrics["mean_dsc"], metrics["mean_hd95"])
    return TrainResult(params, state, history, best, run_dir)


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
