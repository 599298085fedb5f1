"""Training loop."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np
import torch

from ..config import RunConfig
from ..model import VIRD
from ..synthdata.scene import SynthParams
from .checkpoint import save_checkpoint
from .losses import LOSS_KEYS, make_batch, total_loss

log = logging.getLogger(__name__)

LOSS_LOG = "loss_log.csv"
COMPONENT_LOG = "loss_components.csv"
COMPONENT_KEYS = ("L_origin", "L_cross")


def build_model(cfg: RunConfig, data: SynthParams) -> VIRD:
    torch.manual_seed(cfg.train.seed)
    return VIRD(cfg, data)


def train(cfg: RunConfig, pairs, data: SynthParams, out_dir, model: VIRD | None = None) -> Path:
    """Train on ``pairs`` and write checkpoints and loss logs to ``out_dir``.

    A checkpoint is written after every epoch (or once, for ``epochs=0``).
    A non-finite loss raises ``FloatingPointError`` and leaves the last
    completed epoch's checkpoint in place.
    """
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    model = model or build_model(cfg, data)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 1])
    step = 0
    with open(out_dir / LOSS_LOG, "w", newline="") as fh, open(out_dir / COMPONENT_LOG, "w", newline="") as fc:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", *LOSS_KEYS])
        comp = csv.writer(fc)
        comp.writerow(["epoch", "step", *COMPONENT_KEYS])
        if tc.epochs == 0:
            save_checkpoint(model, out_dir, epoch=0, step=0)
        for epoch in range(tc.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(pairs))
            totals = []
            for i in range(0, len(order), tc.batch_size):
                batch = make_batch([pairs[j] for j in order[i:i + tc.batch_size]], model, tc, rng)
                loss, parts = total_loss(batch, model, tc)
                opt.zero_grad()
                loss.backward()
                if tc.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
                opt.step()
                writer.writerow([epoch, step, *(f"{parts[k]:.8g}" for k in LOSS_KEYS)])
                comp.writerow([epoch, step, *(f"{parts[k]:.8g}" for k in COMPONENT_KEYS)])
                totals.append(parts["L_total"])
                step += 1
            fh.flush()
            fc.flush()
            save_checkpoint(model, out_dir, epoch=epoch + 1, step=step)
            log.info("epoch %d/%d  loss %.4f  (%.1fs)", epoch + 1, tc.epochs, float(np.mean(totals)),
                     time.perf_counter() - t0)
    model.eval()
    return out_dir


def read_loss_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def epoch_means(log_rows: dict, key: str) -> np.ndarray:
    epochs = log_rows["epoch"].astype(int)
    return np.array([log_rows[key][epochs == e].mean() for e in np.unique(epochs)])
