"""Acceptance gate.

Each test checks one release criterion end to end and prints a single
`[criterion NN] name: PASS/FAIL` line (run with `pytest -s` to see them
as they happen; they also appear in captured output).

Criteria 6-8 need a pair of desk-scale training runs (channels 32, four
recurrent steps, 2e4 iterations — hours on CPU). Those runs live under
`runs/acceptance/` and are produced by `scripts/run_acceptance.sh`; the
tests load the checkpoints after verifying that the stored configuration
matches the required protocol, and fail with instructions if the
artifacts are absent rather than silently training inline.
"""

import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest
import torch

from dssr.cli import main
from dssr.degradation import (
    BlurKernel,
    blur,
    make_anisotropic_kernel,
    make_isotropic_kernel,
)
from dssr.evaluation import build_testset, evaluate, psnr_y, ssim_y
from dssr.imaging import Image, resize_array
from dssr.model import DssrConfig, Dssr, init_weights
from dssr.synth import make_corpus, synth_image
from dssr.training import TrainConfig, loss_terms, train
from dssr.variants import build_model, load_checkpoint
from reference_impl import (
    correlate_reference,
    psnr_reference,
    resize_reference,
)

ROOT = Path(__file__).resolve().parent.parent
ACCEPT_DIR = ROOT / "runs" / "acceptance"

TINY = DssrConfig(scale=2, channels=8, stru_fe_blocks=1, recon_blocks=1, steps=2)

DESK_MODEL = DssrConfig(scale=2, channels=32, stru_fe_blocks=15,
                        recon_blocks=5, steps=4)
DESK_TRAIN = TrainConfig(alpha=1.0, total_iters=20000, lr_halve_every=4000,
                         batch=8, lr_patch=24, kernel_kind="isotropic",
                         scale=2, seed=0, workers=0)


def report(num, name, ok, detail=""):
    print(f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_01_kernel_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_sum, worst_neg = 0.0, 0.0
    for _ in range(500):
        k = make_isotropic_kernel(21, rng.uniform(0.2, 4.0))
        worst_sum = max(worst_sum, abs(k.weights.sum() - 1.0))
        worst_neg = min(worst_neg, k.weights.min())
    for _ in range(500):
        sx, sy = rng.uniform(0.6, 5.0, size=2)
        k = make_anisotropic_kernel(11, sx, sy, rng.uniform(-np.pi, np.pi),
                                    0.25, rng)
        worst_sum = max(worst_sum, abs(k.weights.sum() - 1.0))
        worst_neg = min(worst_neg, k.weights.min())

    worst_match = 0.0
    for _ in range(50):
        sigma = rng.uniform(0.6, 4.0)
        iso = make_isotropic_kernel(11, sigma)
        aniso = make_anisotropic_kernel(11, sigma, sigma,
                                        rng.uniform(-np.pi, np.pi), 0.0, rng)
        worst_match = max(worst_match,
                          np.abs(iso.weights - aniso.weights).max())
    elapsed = time.perf_counter() - t0

    ok = (worst_sum <= 1e-8 and worst_neg >= 0.0 and worst_match <= 1e-10
          and elapsed < 10.0)
    report(1, "kernel suite", ok,
           f"(sum err {worst_sum:.2e}, min weight {worst_neg:.2e}, "
           f"iso/aniso gap {worst_match:.2e}, {elapsed:.1f}s)")


def test_criterion_02_resampler_oracle():
    rng = np.random.default_rng(2)
    worst_resize = 0.0
    for _ in range(50):
        h, w = rng.integers(8, 41, size=2)
        data = rng.random((h, w, 3))
        oh, ow = (int(v) for v in rng.integers(6, 49, size=2))
        ours = resize_array(data, oh, ow)
        ref = resize_reference(data, oh, ow)
        worst_resize = max(worst_resize, np.abs(ours - ref).max())

    worst_blur = 0.0
    for _ in range(20):
        img = Image(rng.random((5, 5, 3)))
        for size in (3, 5):
            weights = rng.random((size, size))
            weights /= weights.sum()
            kernel = BlurKernel(weights, "isotropic", 1.0, 1.0)
            ours = blur(img, kernel).data
            ref = np.stack([correlate_reference(img.data[..., c], weights)
                            for c in range(3)], axis=-1)
            worst_blur = max(worst_blur, np.abs(ours - ref).max())

    ok = worst_resize <= 1e-4 and worst_blur <= 1e-12
    report(2, "resampler oracle", ok,
           f"(resize err {worst_resize:.2e}, blur err {worst_blur:.2e})")


def test_criterion_03_structural_identities():
    model = init_weights(Dssr(TINY), seed=3).double()
    with torch.no_grad():
        for p in model.parameters():  # biases too: exercise arbitrary values
            p.add_(0.05 * torch.randn(p.shape, dtype=p.dtype,
                                      generator=torch.Generator().manual_seed(3)))
    lr = torch.randn(2, 3, 6, 6, dtype=torch.float64,
                     generator=torch.Generator().manual_seed(33))
    ihat = model.upsample_input(lr)
    hidden = model.initial_hidden(lr)
    f_in = model.shallow(lr)
    fused = model.fuse_hidden(f_in, hidden)
    s_hr, detail = model.dru(fused, ihat)
    identity_gap = (s_hr - detail - ihat).abs().max().item()

    with torch.no_grad():
        for stage in (model.hr_stage, model.lr_stage):
            stage.head[-1].weight.zero_()
            stage.head[-1].bias.zero_()
    d = torch.randn(2, TINY.channels, 6, 6, dtype=torch.float64)
    s_small = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    hr_pass = torch.equal(model.hr_stage(s_small, d), s_small)
    lr_pass = torch.equal(model.lr_stage(s_small, d),
                          torch.zeros_like(s_small))
    with torch.no_grad():
        model.lift.weight.zero_()
        model.lift.bias.zero_()
    smu_pass = torch.equal(model.smu(detail.detach(), s_hr.detach(), fused.detach()),
                           fused.detach())

    ok = identity_gap <= 1e-12 and hr_pass and lr_pass and smu_pass
    report(3, "structural identities", ok,
           f"(s_hr-detail-ihat gap {identity_gap:.2e}, "
           f"pass-throughs {hr_pass}/{lr_pass}/{smu_pass})")


def _conv_act_pairs(model):
    """Each activation together with the convolution producing its input."""
    from dssr.model import ResidualBlock

    pairs = []
    for mod in model.modules():
        if isinstance(mod, ResidualBlock):
            pairs.append((mod.conv1, mod.act))
        elif isinstance(mod, torch.nn.Sequential):
            items = list(mod)
            for a, b in zip(items, items[1:]):
                if (isinstance(a, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))
                        and isinstance(b, torch.nn.LeakyReLU)):
                    pairs.append((a, b))
    return pairs


def _clearing_shift(vals, tau):
    """Smallest bias shift placing every element of vals outside (-tau, tau)."""
    v = np.sort(vals.numpy().ravel())
    candidates = [v[0] - tau - 1e-6, v[-1] + tau + 1e-6]
    candidates += [(v[i] + v[i + 1]) / 2
                   for i in np.nonzero(np.diff(v) > 2 * tau)[0]]
    return -min(candidates, key=abs)


def _move_off_kinks(model, lr, tau=5e-3):
    """Nudge biases until no activation input sits within tau of zero.

    Finite differences are only defined where the loss is differentiable;
    a perturbation of h=1e-3 on a bias shifts a whole zero-centred
    pre-activation map across the LeakyReLU kink, so the evaluation point
    must keep a margin wider than any single-coordinate perturbation.
    """
    pairs = _conv_act_pairs(model)
    captured = {}

    def make_hook(key):
        def hook(mod, inp, out):
            captured.setdefault(key, []).append(inp[0].detach())
        return hook

    handles = [act.register_forward_hook(make_hook(i))
               for i, (_, act) in enumerate(pairs)]
    try:
        with torch.no_grad():
            for _ in range(60):
                captured.clear()
                model(lr)
                dirty = 0
                for i, (conv, _) in enumerate(pairs):
                    per_channel = torch.cat(
                        [x.movedim(1, 0).reshape(x.shape[1], -1)
                         for x in captured[i]], dim=1)
                    for c in range(per_channel.shape[0]):
                        if (per_channel[c].abs() < tau).any():
                            conv.bias[c] += _clearing_shift(per_channel[c], tau)
                            dirty += 1
                if dirty == 0:
                    return
    finally:
        for handle in handles:
            handle.remove()
    raise AssertionError("could not move activations off their kinks")


def test_criterion_04_gradient_check():
    t0 = time.perf_counter()
    model = build_model(TINY, seed=4).double()
    rng = np.random.default_rng(4)
    lr = torch.from_numpy(rng.random((1, 3, 8, 8)))
    _move_off_kinks(model, lr)
    # place the targets a unit above every network output: the absolute-value
    # terms then have locally constant sign, so the loss is differentiable at
    # the evaluation point and the two-sided difference quotient is defined
    with torch.no_grad():
        base = model(lr)
        ihat = model.upsample_input(lr)
        sr_ceiling = torch.stack([o.sr for o in base]).amax(dim=0)
        detail_ceiling = torch.stack([o.detail for o in base]).amax(dim=0)
        hr = torch.maximum(sr_ceiling, ihat + detail_ceiling) + 1.0
    label = hr - ihat

    def loss_value():
        return loss_terms(model(lr), hr, label, alpha=1.0)[0]

    model.zero_grad()
    loss_value().backward()
    analytic = {name: p.grad.detach().clone()
                for name, p in model.named_parameters()}

    h = 1e-3
    checked = passed = 0
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            count = min(6, flat.numel())
            for idx in rng.choice(flat.numel(), size=count, replace=False):
                original = flat[idx].item()
                flat[idx] = original + h
                up = loss_value().item()
                flat[idx] = original - h
                down = loss_value().item()
                flat[idx] = original
                numeric = (up - down) / (2 * h)
                exact = analytic[name].view(-1)[idx].item()
                checked += 1
                if abs(exact) < 1e-8 and abs(numeric) < 1e-8:
                    passed += 1
                    continue
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric))
                worst = max(worst, rel)
                if rel <= 1e-3:
                    passed += 1
    elapsed = time.perf_counter() - t0

    fraction = passed / checked
    ok = fraction >= 0.99 and elapsed < 300
    report(4, "gradient check", ok,
           f"({passed}/{checked} coords = {fraction:.4f}, "
           f"worst rel {worst:.2e}, {elapsed:.0f}s)")


def _smooth_shapes(seed, size=48):
    """Noise-free ramps plus a few hard-edged disks: detail maps that a
    tiny network can memorize quickly."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.stack([a * xx + b * yy + c
                    for a, b, c in rng.uniform(0.1, 0.5, (3, 3))], axis=-1)
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.1, 0.3)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2] = rng.uniform(0.0, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def test_criterion_05_overfit_smoke(tmp_path):
    t0 = time.perf_counter()
    corpus = [_smooth_shapes(i) for i in range(4)]
    # constant learning rate (first halving lands after the horizon); the
    # fixed seed pins the batch, and with it the sampled blur widths
    cfg = TrainConfig(alpha=1.0, lr0=1e-3, total_iters=500,
                      lr_halve_every=1000, batch=2, lr_patch=8, scale=2,
                      seed=6, log_every=10, checkpoint_every=500,
                      fixed_batch=True)
    state = train(cfg, TINY, corpus, tmp_path)
    totals = {it: total for it, _, _, total in state.history}
    ratio = totals[10] / totals[500]
    elapsed = time.perf_counter() - t0

    ok = ratio >= 10.0 and elapsed < 600
    report(5, "overfit smoke", ok,
           f"(loss {totals[10]:.4f} -> {totals[500]:.5f}, "
           f"ratio {ratio:.1f}x, {elapsed:.0f}s)")


def _load_acceptance_model(tag, alpha):
    """Load a desk-scale run after verifying it used the required protocol."""
    ckpt = ACCEPT_DIR / tag / "last.pt"
    if not ckpt.is_file():
        pytest.fail(f"missing acceptance artifact {ckpt}; "
                    "run scripts/run_acceptance.sh first (hours on CPU)")
    model, payload = load_checkpoint(ckpt)
    stored = payload["extra"]["train_config"]
    want = replace(DESK_TRAIN, alpha=alpha)
    # betas are optimizer constants; log/checkpoint cadence never touches
    # the weight trajectory — everything else must match the protocol
    skip = {"betas", "log_every", "checkpoint_every"}
    mismatches = [f"{k}={stored[k]!r} (want {v!r})"
                  for k, v in asdict(want).items()
                  if k not in skip and stored.get(k) != v]
    if asdict(model.config) != asdict(DESK_MODEL):
        mismatches.append(f"model config {asdict(model.config)}")
    if payload["extra"]["iteration"] != want.total_iters:
        mismatches.append(f"iteration={payload['extra']['iteration']}")
    if mismatches:
        pytest.fail(f"{ckpt} does not match the required protocol: "
                    + "; ".join(mismatches))
    return model


@pytest.fixture(scope="module")
def heldout_pairs():
    test_dir = ACCEPT_DIR / "corpus" / "test"
    if not test_dir.is_dir():
        make_corpus(test_dir, 10, size=128, seed=200)
    return build_testset(test_dir, scale=2, protocol="gaussian8")


@pytest.fixture(scope="module")
def alpha1_report(heldout_pairs):
    model = _load_acceptance_model("alpha1", alpha=1.0)
    return evaluate(model, heldout_pairs).aggregates


@pytest.fixture(scope="module")
def alpha0_report(heldout_pairs):
    model = _load_acceptance_model("alpha0", alpha=0.0)
    return evaluate(model, heldout_pairs).aggregates


def test_criterion_06_desk_scale_generalization(alpha1_report):
    psnr = alpha1_report["psnr_final"]
    base = alpha1_report["bicubic_psnr"]
    margin = psnr - base
    ok = margin >= 1.0
    report(6, "desk-scale generalization", ok,
           f"(final-step {psnr:.2f} dB vs bicubic {base:.2f} dB, "
           f"margin {margin:+.2f} dB)")


def test_criterion_07_recurrence_trend(alpha1_report):
    psnr_steps = alpha1_report["psnr_per_step"]
    detail_steps = alpha1_report["detail_l1_per_step"]
    ok = psnr_steps[3] >= psnr_steps[0] and detail_steps[3] <= detail_steps[0]
    report(7, "recurrence trend", ok,
           f"(PSNR {psnr_steps[0]:.4f} -> {psnr_steps[3]:.4f} dB, "
           f"detail L1 {detail_steps[0]:.5f} -> {detail_steps[3]:.5f})")


def test_criterion_08_alpha_ablation_trend(alpha1_report, alpha0_report):
    gap = alpha1_report["psnr_final"] - alpha0_report["psnr_final"]
    d1 = alpha1_report["detail_l1_per_step"][-1]
    d0 = alpha0_report["detail_l1_per_step"][-1]
    ok = gap >= -0.05 and d1 < d0
    report(8, "alpha ablation trend", ok,
           f"(PSNR gap {gap:+.3f} dB, detail L1 {d1:.4f} vs {d0:.4f})")


def test_criterion_09_metric_oracle():
    pytest.importorskip("skimage")
    from skimage.metrics import structural_similarity

    def luma(x):  # BT.601 studio-swing, written out independently
        return (x @ np.array([65.481, 128.553, 24.966]) + 16.0) / 255.0

    rng = np.random.default_rng(9)
    worst_psnr = worst_ssim = 0.0
    for _ in range(20):
        clean = synth_image(rng, size=64)
        noisy = np.clip(clean + rng.normal(0, 0.03, clean.shape), 0.0, 1.0)
        a, b = Image(clean), Image(noisy)

        ours = psnr_y(a, b)
        ref = psnr_reference(luma(clean), luma(noisy))
        worst_psnr = max(worst_psnr, abs(ours - ref))

        ref_ssim = structural_similarity(
            luma(clean), luma(noisy), win_size=11, data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        worst_ssim = max(worst_ssim, abs(ssim_y(a, b) - ref_ssim))

    ok = worst_psnr <= 0.01 and worst_ssim <= 0.001
    report(9, "metric oracle", ok,
           f"(psnr gap {worst_psnr:.2e} dB, ssim gap {worst_ssim:.2e})")


def test_criterion_10_snapshot_determinism(tmp_path):
    hr_dir = tmp_path / "hr"
    make_corpus(hr_dir, 3, size=64, seed=10)

    first = tmp_path / "first"
    rc = main(["train", "--preset", "smoke", "--corpus", str(hr_dir),
               "--out", str(first), "--total-iters", "8",
               "--checkpoint-every", "8", "--log-every", "2",
               "--seed", "10", "--workers", "0"])
    assert rc == 0
    second = tmp_path / "second"
    rc = main(["train", "--config", str(first / "resolved_config.txt"),
               "--out", str(second)])
    assert rc == 0
    train_same = ((first / "train_log.csv").read_bytes()
                  == (second / "train_log.csv").read_bytes())

    eval_first = tmp_path / "eval1"
    rc = main(["eval", "--checkpoint", str(first / "last.pt"),
               "--test-dir", str(hr_dir), "--out", str(eval_first),
               "--seed", "10"])
    assert rc == 0
    eval_second = tmp_path / "eval2"
    rc = main(["eval", "--config", str(eval_first / "resolved_config.txt"),
               "--out", str(eval_second)])
    assert rc == 0
    eval_same = ((eval_first / "metrics.csv").read_bytes()
                 == (eval_second / "metrics.csv").read_bytes())

    ok = train_same and eval_same
    report(10, "snapshot determinism", ok,
           f"(train CSV identical: {train_same}, eval CSV identical: {eval_same})")
