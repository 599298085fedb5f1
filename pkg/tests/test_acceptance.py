"""End-to-end acceptance criteria A1-A8.

The trained artifacts (datasets, full and polar-only checkpoints, reports) live in
``$VIRD_ACCEPTANCE_DIR`` (default ``<repo>/.acceptance``). They are reused only
when their fingerprint matches the current configuration and package sources;
otherwise everything is regenerated and retrained from scratch.
"""

import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from torch.func import functional_call

import vird
from vird import cli
from vird.cepa import CEPA
from vird.config import resolve_config
from vird.experiment import evaluate, load_checkpoint, write_report
from vird.experiment.train import COMPONENT_LOG, epoch_means, read_loss_log, train
from vird.geometry import ImageFrame, PolarConfig, crop_indices, make_pose_grid, polar_transform
from vird.posesearch import (NORM_EPS, RegressionConfig, RegressionHead, coarse_match, infonce_loss,
                             regress_residual, regression_loss, similarity_volume)
from vird.reconstruction import Decoder
from vird.synthdata import SynthParams, generate_dataset, read_dataset, write_dataset

pytestmark = pytest.mark.acceptance

REPO = Path(__file__).resolve().parents[1]
EPOCHS = 20
TRAIN_SEED, TEST_SEED = 0, 1
N_TRAIN, N_TEST = 512, 128
SEARCH_EXTENT = 16.0

# Medians of the default configuration recorded by a baseline run of this pipeline
# (20 epochs, 20x20 grid, 16 orientation candidates, regression on).
BASELINE_POS_M = 0.445
BASELINE_ORIENT_DEG = 2.83
POS_CEILING_M = 0.15 * SEARCH_EXTENT
ORIENT_CEILING_DEG = 15.0
POS_THRESHOLD_M = min(1.25 * BASELINE_POS_M, POS_CEILING_M) if BASELINE_POS_M else POS_CEILING_M
ORIENT_THRESHOLD_DEG = min(1.25 * BASELINE_ORIENT_DEG, ORIENT_CEILING_DEG) if BASELINE_ORIENT_DEG \
    else ORIENT_CEILING_DEG


# --- A1 / A2 / A3: property suites -------------------------------------------

INVARIANT_FILES = ["test_geometry.py", "test_cepa.py", "test_encoder.py", "test_reconstruction.py",
                   "test_posesearch.py", "test_model.py"]


def test_a1_invariant_suite(criterion):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "not gradcheck",
         *(str(REPO / "tests" / f) for f in INVARIANT_FILES)],
        capture_output=True, text=True, cwd=REPO)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = criterion("A1 invariant suite", proc.returncode == 0 and elapsed < 120,
                   f"{summary}; {elapsed:.1f}s (limit 120s)")
    assert ok, proc.stdout[-3000:]


def max_relative_error(fn, inputs, eps=1e-6):
    """Analytic Jacobian vs central finite differences, ``max|J_a - J_n| / max|J_n|``."""
    shapes = [x.shape for x in inputs]
    sizes = [x.numel() for x in inputs]
    flat0 = torch.cat([x.detach().reshape(-1) for x in inputs]).double()

    def g(flat):
        parts = torch.split(flat, sizes)
        return fn(*(p.reshape(s) for p, s in zip(parts, shapes))).reshape(-1)

    J_a = torch.autograd.functional.jacobian(g, flat0)
    J_n = torch.empty_like(J_a)
    with torch.no_grad():
        for i in range(flat0.numel()):
            e = torch.zeros_like(flat0)
            e[i] = eps
            J_n[:, i] = (g(flat0 + e) - g(flat0 - e)) / (2 * eps)
    return float((J_a - J_n).abs().max() / J_n.abs().max().clamp_min(1e-300))


def module_fn(module, body):
    """``body(call, *inputs)`` as a function of its inputs followed by every module parameter."""
    names = [n for n, _ in module.named_parameters()]

    def fn(*args):
        n_in = len(args) - len(names)
        params = dict(zip(names, args[n_in:]))
        return body(lambda *a: functional_call(module, params, a), *args[:n_in])
    return fn, [p.detach().clone() for p in module.parameters()]


class _CepaBoth(torch.nn.Module):
    def __init__(self, cepa):
        super().__init__()
        self.cepa = cepa

    def forward(self, F_g, F_s):
        return torch.cat([self.cepa.ground(F_g).reshape(-1), self.cepa.satellite(F_s).reshape(-1)])


def _gradient_cases():
    gen = torch.Generator().manual_seed(0)
    rnd = lambda *s: torch.randn(*s, generator=gen, dtype=torch.float64)  # noqa: E731

    torch.manual_seed(0)
    cepa = _CepaBoth(CEPA(2, 3, 2, d_p=4, d_k=2, phi_hidden=3)).double()
    f_cepa, p_cepa = module_fn(cepa, lambda call, F_g, F_s: call(F_g, F_s))

    cfg, frame = PolarConfig(0.3, 3.0, 3, 8), ImageFrame(0.5, 10, 10)
    sat = torch.rand(2, 10, 10, generator=gen, dtype=torch.float64)

    torch.manual_seed(1)
    dec = Decoder(2, 2, (4, 8), channels=2, hidden=3).double()
    f_dec, p_dec = module_fn(dec, lambda call, D: call(D))

    target = torch.randint(0, 7, (2,), generator=gen)

    torch.manual_seed(2)
    head = RegressionHead(2, 4, RegressionConfig(conv_widths=(3,), hidden=4)).double()
    D_s, p_m, d_star = rnd(2, 4, 2), rnd(2, 3), rnd(2, 3)
    f_reg, p_reg = module_fn(
        head, lambda call, D_g: regression_loss(_called_head(head, call, D_g, D_s, p_m), d_star, 5.0))

    return {
        "CEPA block": (f_cepa, [rnd(1, 2, 3, 4), rnd(2, 3, 4), *p_cepa]),
        "polar transform": (lambda s: polar_transform(s, (5.2, 4.9), cfg, frame), [sat]),
        "decoders": (f_dec, [rnd(1, 2, 2), *p_dec]),
        "InfoNCE": (lambda s: infonce_loss(s, target, 0.05), [rnd(2, 7)]),
        "regression loss": (f_reg, [rnd(2, 4, 2), *p_reg]),
    }


def _called_head(head, call, D_g, D_s, p_m):
    """``regress_residual`` with the head's forward routed through ``call``."""
    class Proxy(torch.nn.Module):
        cfg = head.cfg

        def forward(self, diff, pose):
            return call(diff, pose)
    return regress_residual(D_g, D_s, p_m, Proxy(), 8.0)


def test_a2_gradient_checks(criterion):
    t0 = time.perf_counter()
    errors = {name: max_relative_error(fn, inputs) for name, (fn, inputs) in _gradient_cases().items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f}s"
    assert criterion("A2 gradient checks", worst < 1e-4 and elapsed < 120, detail), detail


def _naive_volume(D_g, D_s, g):
    W_g = D_g.shape[0]
    gv = D_g.reshape(-1)
    gv = gv / gv.norm().clamp_min(NORM_EPS)
    out = torch.empty(g.G, g.G, g.n_theta, dtype=D_g.dtype)
    for ix in range(g.G):
        for iy in range(g.G):
            for t in range(g.n_theta):
                idx = torch.as_tensor(crop_indices(int(g.shifts[t]), g.W_s, W_g))
                sv = D_s[ix * g.G + iy][idx].reshape(-1)
                sv = sv / sv.norm().clamp_min(NORM_EPS)
                out[ix, iy, t] = (sv * gv).sum()
    return out


def _naive_argmax(scores):
    flat = scores.reshape(-1).tolist()
    best = 0
    for i, v in enumerate(flat):
        if v > flat[best]:
            best = i
    return best


def test_a3_oracle_equivalence(criterion):
    rng = np.random.default_rng(0)
    frame = ImageFrame(0.5, 64, 64)
    t0 = time.perf_counter()
    failures = 0
    for trial in range(100):
        G = 10 if trial == 0 else int(rng.integers(1, 11))
        n_theta = 16 if trial == 0 else int(rng.choice([1, 2, 4, 8, 16]))
        W_g = int(rng.choice([4, 8, 16]))
        g = make_pose_grid(16, G, n_theta, frame, PolarConfig(0, 8, 4, 16))
        gen = torch.Generator().manual_seed(trial)
        D_g = torch.randn(W_g, 8, generator=gen)
        D_s = torch.randn(G * G, 16, 8, generator=gen)
        vol = similarity_volume(D_g, D_s, g)
        ref = _naive_volume(D_g, D_s, g)
        pose, flat = coarse_match(vol)
        best = _naive_argmax(ref)
        if not (torch.equal(vol.scores, ref) and flat == best and pose == g.pose(*g.unravel(best))):
            failures += 1
    elapsed = time.perf_counter() - t0
    ok = criterion("A3 oracle equivalence", failures == 0 and elapsed < 60,
                   f"{100 - failures}/100 bitwise matches; {elapsed:.1f}s (limit 60s)")
    assert ok


# --- A4-A8: trained pipeline ---------------------------------------------------

def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(vird.__file__).parent.rglob("*.py")):
        h.update(path.relative_to(REPO / "src").as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _config(*ablate):
    return resolve_config(None, [f"train.epochs={EPOCHS}"], ablate)


def _dataset(root: Path, seed: int, count: int, params: SynthParams):
    directory = root / f"data_seed{seed}_n{count}"
    if not (directory / "manifest.json").exists():
        write_dataset(generate_dataset(seed, count, params), directory, seed=seed, params=params)
    return read_dataset(directory)[0]


def _trained(root: Path, name: str, cfg, pairs, params, fingerprint: dict) -> tuple[Path, float]:
    out = root / name
    stamp = out / "fingerprint.json"
    if stamp.exists():
        saved = json.loads(stamp.read_text())
        if saved["fingerprint"] == fingerprint:
            return out, saved["train_seconds"]
    t0 = time.perf_counter()
    train(cfg, pairs, params, out)
    seconds = time.perf_counter() - t0
    stamp.write_text(json.dumps({"fingerprint": fingerprint, "train_seconds": seconds}, indent=2))
    return out, seconds


@pytest.fixture(scope="module")
def pipeline():
    root = Path(os.environ.get("VIRD_ACCEPTANCE_DIR", REPO / ".acceptance"))
    root.mkdir(parents=True, exist_ok=True)
    params = SynthParams(search_extent=SEARCH_EXTENT)
    train_pairs = _dataset(root, TRAIN_SEED, N_TRAIN, params)
    test_pairs = _dataset(root, TEST_SEED, N_TEST, params)
    digest = _source_digest()
    runs = {}
    for name, ablate in (("full", ()), ("no_cepa", ("cepa",))):
        cfg = _config(*ablate)
        fingerprint = {"config": cfg.to_dict(), "params": json.loads(json.dumps(params.__dict__, default=list)),
                       "train_seed": TRAIN_SEED, "n_train": N_TRAIN, "sources": digest}
        ckpt, seconds = _trained(root, name, cfg, train_pairs, params, fingerprint)
        runs[name] = {"checkpoint": ckpt, "train_seconds": seconds, "model": load_checkpoint(ckpt)}
    cache = {}

    def report(name, G=None, use_regression=None):
        key = (name, G, use_regression)
        if key not in cache:
            cache[key] = evaluate(runs[name]["model"], test_pairs, G=G, use_regression=use_regression)
        return cache[key]

    return {"root": root, "runs": runs, "report": report, "train": train_pairs, "test": test_pairs}


def test_a4_learnability(pipeline, criterion):
    rep = pipeline["report"]("full")
    write_report(rep, pipeline["root"] / "full_eval")
    m = rep.metrics
    seconds = pipeline["runs"]["full"]["train_seconds"] + rep.runtime["total_s"]
    ok = (m["pos_median_m"] < POS_THRESHOLD_M and m["orient_median_deg"] < ORIENT_THRESHOLD_DEG
          and seconds < 2 * 3600)
    detail = (f"median position {m['pos_median_m']:.3f} m (< {POS_THRESHOLD_M:.3f}), median orientation "
              f"{m['orient_median_deg']:.2f} deg (< {ORIENT_THRESHOLD_DEG:.2f}), grid {rep.grid['G']}x"
              f"{rep.grid['G']}x{rep.grid['n_theta']}, train+eval {seconds / 60:.1f} min")
    assert criterion("A4 learnability", ok, detail), detail


def test_a5_reconstruction_signal(pipeline, criterion):
    log = read_loss_log(pipeline["runs"]["full"]["checkpoint"] / COMPONENT_LOG)
    drops = {}
    for key in ("L_origin", "L_cross"):
        means = epoch_means(log, key)
        drops[key] = 1.0 - means[-1] / means[0]
    detail = ", ".join(f"{k} drop {100 * v:.1f}%" for k, v in drops.items()) + " (need >= 50%)"
    assert criterion("A5 reconstruction signal", min(drops.values()) >= 0.5, detail), detail


def test_a6_regression_refinement(pipeline, criterion):
    with_reg = pipeline["report"]("full", use_regression=True).metrics
    without = pipeline["report"]("full", use_regression=False).metrics
    ok = (with_reg["pos_median_m"] <= 1.05 * without["pos_median_m"]
          and with_reg["orient_median_deg"] < without["orient_median_deg"])
    detail = (f"position {with_reg['pos_median_m']:.3f} vs {without['pos_median_m']:.3f} m (<= 1.05x), "
              f"orientation {with_reg['orient_median_deg']:.3f} vs {without['orient_median_deg']:.3f} deg (<)")
    assert criterion("A6 regression refinement", ok, detail), detail


def test_a7_ablation_direction(pipeline, criterion):
    full = pipeline["report"]("full").metrics
    polar = pipeline["report"]("no_cepa").metrics
    summary = {
        "full": {"pos_median_m": full["pos_median_m"], "orient_median_deg": full["orient_median_deg"]},
        "no_cepa": {"pos_median_m": polar["pos_median_m"], "orient_median_deg": polar["orient_median_deg"]},
    }
    write_report(pipeline["report"]("full"), pipeline["root"] / "full_eval", extra={"ablation": summary})
    write_report(pipeline["report"]("no_cepa"), pipeline["root"] / "no_cepa_eval", extra={"ablation": summary})
    ok = polar["orient_median_deg"] >= full["orient_median_deg"]
    detail = (f"median orientation without attention {polar['orient_median_deg']:.2f} deg vs full "
              f"{full['orient_median_deg']:.2f} deg (>=)")
    assert criterion("A7 ablation direction", ok, detail), detail


def test_a8_sampling_density(pipeline, criterion):
    med = {G: pipeline["report"]("full", G=G).metrics["pos_median_m"] for G in (5, 10, 20)}
    ok = med[20] <= 1.05 * med[10] and med[10] <= 1.05 * med[5]
    detail = ", ".join(f"{G}x{G}: {v:.3f} m" for G, v in med.items()) + " (each step <= 1.05x)"
    assert criterion("A8 sampling density", ok, detail), detail


def test_infer_on_training_sample(pipeline, tmp_path, capsys):
    from PIL import Image

    pair = pipeline["train"][0]
    sat, grd = tmp_path / "sat.png", tmp_path / "grd.png"
    Image.fromarray(pair.sat).save(sat)
    Image.fromarray(pair.grd).save(grd)
    code = cli.main(["infer", "--checkpoint", str(pipeline["runs"]["full"]["checkpoint"]), "--sat", str(sat),
                     "--grd", str(grd), "--res", str(pair.frame.resolution), "--out", str(tmp_path / "o.png")])
    assert code == 0
    fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    err = math.hypot(float(fields["x_m"]) - pair.pose.x, float(fields["y_m"]) - pair.pose.y)
    assert err < POS_THRESHOLD_M
