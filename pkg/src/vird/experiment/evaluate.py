"""Grid-search evaluation and report files."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..geometry import Pose, PoseGrid, make_pose_grid
from ..model import VIRD, to_tensor
from ..posesearch import coarse_match, regress_residual, similarity_volume
from ..reconstruction import shift_crop_batch
from .metrics import aggregate, pose_error

POSITION_CHUNK = 100


@dataclass
class Prediction:
    id: str
    gt: Pose
    coarse: Pose
    final: Pose
    score: float
    errors: dict
    coarse_errors: dict


@dataclass
class EvalReport:
    grid: dict
    regression: bool
    metrics: dict
    coarse_metrics: dict
    runtime: dict
    samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"grid": self.grid, "regression": self.regression, "count": len(self.samples),
                "metrics": self.metrics, "coarse_metrics": self.coarse_metrics, "runtime": self.runtime}


def eval_grid(model: VIRD, G: int, n_theta: int) -> PoseGrid:
    if G < 1 or n_theta < 1:
        raise ValueError("evaluation grid needs at least one candidate")
    return make_pose_grid(model.cfg.train.search_extent, G, n_theta, model.sat_frame, model.polar)


@torch.no_grad()
def satellite_grid_blocks(model: VIRD, F_s: torch.Tensor, grid: PoseGrid, jobs: int = 1) -> torch.Tensor:
    """Descriptor blocks ``(G*G, W_s, C_d)`` for every grid position, built in chunks."""
    positions = grid.positions
    chunks = [positions[i:i + POSITION_CHUNK] for i in range(0, len(positions), POSITION_CHUNK)]

    def run(chunk):
        return model.sat_blocks(F_s, chunk[None])[0]

    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return torch.cat(parts, dim=0)


@torch.no_grad()
def localize(model: VIRD, sat: np.ndarray, grd: np.ndarray, grid: PoseGrid, use_regression: bool = True,
             jobs: int = 1) -> tuple[Pose, Pose, float]:
    """Coarse argmax pose, refined pose and best score for one image pair (uint8 HWC arrays)."""
    I_g = to_tensor(grd)[None]
    I_s = to_tensor(sat)[None]
    D_g = model.ground(I_g)
    F_s = model.sat_features(I_s)
    blocks = satellite_grid_blocks(model, F_s, grid, jobs)
    vol = similarity_volume(D_g[0], blocks, grid)
    p_m, flat = coarse_match(vol)
    score = float(vol.scores.reshape(-1)[flat])
    if not use_regression:
        return p_m, p_m, score
    ix, iy, t = grid.unravel(flat)
    D_s = shift_crop_batch(blocks[ix * grid.G + iy][None], [int(grid.shifts[t])], model.W_g)
    delta = regress_residual(D_g, D_s, torch.tensor([p_m.as_tuple()], dtype=D_g.dtype), model.regressor,
                             model.half_extent)[0]
    return p_m, p_m + delta.tolist(), score


def evaluate(model: VIRD, pairs, G: int | None = None, n_theta: int | None = None,
             use_regression: bool | None = None, jobs: int = 1) -> EvalReport:
    """Localize every pair on a ``G x G x n_theta`` grid and aggregate errors.

    ``n_theta`` is reduced to a divisor of ``W_s``; the report records both
    the requested and the effective count. Model parameters are not modified.
    """
    tc = model.cfg.train
    G = tc.test_grid if G is None else G
    requested = tc.test_ntheta if n_theta is None else n_theta
    use_regression = tc.use_regression if use_regression is None else use_regression
    grid = eval_grid(model, G, requested)
    was_training = model.training
    model.eval()
    preds = []
    t0 = time.perf_counter()
    for p in pairs:
        coarse, final, score = localize(model, p.sat, p.grd, grid, use_regression, jobs)
        preds.append(Prediction(p.id, p.pose, coarse, final, score, pose_error(final, p.pose),
                                pose_error(coarse, p.pose)))
    elapsed = time.perf_counter() - t0
    model.train(was_training)
    return EvalReport(
        grid={"G": G, "n_theta": grid.n_theta, "n_theta_requested": requested, "stride_m": grid.stride,
              "candidates": grid.size},
        regression=use_regression,
        metrics=aggregate([q.errors for q in preds]),
        coarse_metrics=aggregate([q.coarse_errors for q in preds]),
        runtime={"total_s": elapsed, "per_sample_s": elapsed / max(len(preds), 1)},
        samples=preds,
    )


PER_SAMPLE_COLUMNS = ["id", "gt_x", "gt_y", "gt_theta", "pred_x", "pred_y", "pred_theta", "coarse_x", "coarse_y",
                      "coarse_theta", "score", "pos_err_m", "lateral_m", "longitudinal_m", "orient_err_deg",
                      "coarse_pos_err_m", "coarse_orient_err_deg"]


def write_report(report: EvalReport, out_dir, extra: dict | None = None) -> Path:
    """Write ``report.json`` and ``per_sample.csv``; runtime is kept out of the JSON diff path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    data.pop("runtime")
    if extra:
        data.update(extra)
    (out_dir / "report.json").write_text(json.dumps(data, indent=2, sort_keys=True))
    (out_dir / "runtime.json").write_text(json.dumps(report.runtime, indent=2))
    with open(out_dir / "per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_SAMPLE_COLUMNS)
        for q in report.samples:
            w.writerow([q.id, *map(repr, q.gt.as_tuple()), *map(repr, q.final.as_tuple()),
                        *map(repr, q.coarse.as_tuple()), repr(q.score), repr(q.errors["pos_err_m"]),
                        repr(q.errors["lateral_m"]), repr(q.errors["longitudinal_m"]),
                        repr(q.errors["orient_err_deg"]), repr(q.coarse_errors["pos_err_m"]),
                        repr(q.coarse_errors["orient_err_deg"])])
    return out_dir / "report.json"
