"""Acceptance criteria.  Each test prints one PASS/FAIL line, collected again
in the terminal summary.  Criteria 1-2 train full-width models and take
most of the runtime (about 45 minutes on one CPU core).
"""

import hashlib
import math
import time

import numpy as np
import pytest
import torch

from conftest import FULL_MNIST_DIR, record_acceptance
from ifmlab import data
from ifmlab.data import build_splits, build_texture_bank, bundled_mnist_dir, load_mnist, read_split, write_split
from ifmlab.errors import DivergedLoss
from ifmlab.evaluation import LITERATURE_ROWS, evaluate, report
from ifmlab.mi import LN4, IFMHead, PairBatch, estimate_mi_gaussian, gaussian_reference_jsd, jsd_objective, sample_pairs, upsample_nearest
from ifmlab.models import ClassifierConfig, DiscriminatorConfig, init_params
from ifmlab.training import TrainConfig, select_checkpoints, train
from scipy import stats

from test_gradients import clf_loss_case, clf_tap_cases, full_objective_case, gradient_errors, jsd_case

pytestmark = pytest.mark.slow

EPOCHS = 20
IFM_SEEDS = (0, 1, 2)


def pct(x):
    return f"{100 * x:.2f}%"


@pytest.fixture(scope="module")
def desk_bundle():
    """The bundled real-digit corpus: 6400 train / 1600 val / 2000 test."""
    tr = load_mnist(bundled_mnist_dir(), "train")
    te = load_mnist(bundled_mnist_dir(), "t10k")
    return build_splits(tr, te, build_texture_bank("procedural", 0), seed=0)


@pytest.fixture(scope="module")
def baseline(desk_bundle):
    result = train(TrainConfig(epochs=EPOCHS, lambda_ifm=0.0), desk_bundle)
    return {
        "digit": evaluate(result.best_digit, desk_bundle.test),
        "texture": evaluate(result.best_texture, desk_bundle.test),
        "result": result,
    }


@pytest.fixture(scope="module")
def ifm_runs(desk_bundle):
    runs = {}
    for seed in IFM_SEEDS:
        cfg = TrainConfig(epochs=EPOCHS, lambda_ifm=1.0, data_seed=seed, model_seed=seed, sampling_seed=seed)
        result = train(cfg, desk_bundle)
        runs[seed] = {
            "digit": evaluate(result.best_digit, desk_bundle.test),
            "texture": evaluate(result.best_texture, desk_bundle.test),
            "result": result,
        }
    return runs


def test_c1_baseline_texture_dominance(desk_bundle, baseline):
    r = baseline["texture"]
    ok = r.texture_accuracy >= 0.85 and r.digit_accuracy <= 0.20
    record_acceptance(
        "C1 baseline texture dominance",
        ok,
        f"n_train={len(desk_bundle.train)} epochs={EPOCHS} best-texture epoch {baseline['result'].best_texture_epoch}: "
        f"test texture {pct(r.texture_accuracy)} (>= 85%), digit {pct(r.digit_accuracy)} (<= 20%)",
    )
    assert ok


def test_c2_ifm_digit_recovery(baseline, ifm_runs):
    base = baseline["texture"]
    passes, details = 0, []
    for seed, run in ifm_runs.items():
        r = run["digit"]
        ok = (
            r.digit_accuracy >= 0.30
            and r.digit_accuracy >= 2 * base.digit_accuracy
            and r.texture_accuracy <= base.texture_accuracy - 0.15
        )
        passes += ok
        details.append(
            f"seed {seed} epoch {run['result'].best_digit_epoch}: digit {pct(r.digit_accuracy)} "
            f"texture {pct(r.texture_accuracy)} {'ok' if ok else 'miss'}"
        )
    results = [baseline["digit"], baseline["texture"], ifm_runs[IFM_SEEDS[0]]["digit"], ifm_runs[IFM_SEEDS[0]]["texture"]]
    print(report(results, LITERATURE_ROWS, with_paper_refs=True).table_text)
    ok = passes >= 2
    record_acceptance(
        "C2 IFM digit recovery",
        ok,
        f"{passes}/3 seeds pass (need 2; baseline digit {pct(base.digit_accuracy)}, "
        f"texture {pct(base.texture_accuracy)}); " + "; ".join(details),
    )
    assert ok


def test_c2_objective_form_comparison(desk_bundle):
    # informational: the literal form is unbounded above and tends to diverge
    cfg = TrainConfig(epochs=2, lambda_ifm=1.0, objective_form="paper_literal")
    try:
        result = train(cfg, desk_bundle)
        r = evaluate(result.best_digit, desk_bundle.test)
        detail = f"paper_literal, 2 epochs: digit {pct(r.digit_accuracy)} texture {pct(r.texture_accuracy)}"
    except DivergedLoss as exc:
        detail = f"paper_literal diverged at step {exc.step}"
    print(f"[INFO] objective form comparison: {detail}")


def test_c3_gaussian_estimator():
    start = time.perf_counter()
    ref0, ref9, ref9n = gaussian_reference_jsd(0.0), gaussian_reference_jsd(0.9), gaussian_reference_jsd(-0.9)
    est = {rho: estimate_mi_gaussian(rho, 50_000, 2000, seed=0).value.item() for rho in (0.0, 0.5, 0.9)}
    elapsed = time.perf_counter() - start
    checks = {
        "|est(0)|<=0.05": abs(est[0.0]) <= 0.05,
        "increasing": est[0.0] < est[0.5] < est[0.9],
        "est(0.9) within 20%": abs(est[0.9] - ref9.jsd2) <= 0.2 * ref9.jsd2,
        "oracle(0)=0": abs(ref0.jsd2) <= 1e-6,
        "oracle symmetric": abs(ref9.jsd2 - ref9n.jsd2) <= 1e-6,
        "runtime<=5min": elapsed <= 300,
    }
    ok = all(checks.values())
    record_acceptance(
        "C3 Gaussian estimator",
        ok,
        f"estimates {est[0.0]:.4f}/{est[0.5]:.4f}/{est[0.9]:.4f} vs oracle "
        f"{ref0.jsd2:.5f}/{gaussian_reference_jsd(0.5).jsd2:.5f}/{ref9.jsd2:.5f}, {elapsed:.0f}s; "
        + (", ".join(f"{k} FAILED" for k, v in checks.items() if not v) or "all checks hold"),
    )
    assert ok


def test_c4_gradient_check_step_1e3():
    step, tol = 1e-3, 1e-4
    errors = {}
    fn, tensors = clf_loss_case()
    errors.update({f"L_clf/{k}": v for k, v in gradient_errors(fn, tensors, step).items()})
    for name, fn, tensors in clf_tap_cases():
        errors.update({f"L_clf/{k}": v for k, v in gradient_errors(fn, tensors, step).items()})
    for pair in range(3):
        fn, tensors, _ = jsd_case(pair)
        errors.update({f"F{pair}/{k}": v for k, v in gradient_errors(fn, tensors, step).items()})
    fn, tensors, _, _ = full_objective_case()
    errors.update({f"L/{k}": v for k, v in gradient_errors(fn, tensors, step).items()})
    worst = sorted(errors.items(), key=lambda kv: -kv[1])
    failing = [k for k, v in worst if v > tol]
    ok = not failing
    record_acceptance(
        "C4 gradient check (step 1e-3)",
        ok,
        f"{len(errors) - len(failing)}/{len(errors)} tensors within {tol:g}; worst "
        + ", ".join(f"{k}={v:.1e}" for k, v in worst[:3]),
    )
    assert ok, dict(worst[: len(failing)])


def test_c5_estimator_bound():
    rng = np.random.default_rng(2024)
    worst = -math.inf
    for trial in range(10_000):
        width = int(rng.integers(2, 33))
        hidden = tuple(int(h) for h in rng.integers(2, 17, size=3))
        disc = init_params(DiscriminatorConfig(width, hidden), int(rng.integers(2**31)))
        w_scale = 10 ** rng.uniform(-3, 3)
        with torch.no_grad():
            for p in disc.parameters():
                p.mul_(w_scale)
        disc.train(bool(rng.integers(2)))
        m = int(rng.integers(2, 65))
        x_scale = 10 ** rng.uniform(-3, 3)
        g = torch.Generator().manual_seed(int(rng.integers(2**31)))
        pairs = PairBatch(x_scale * torch.randn(m, width, generator=g), x_scale * torch.randn(m, width, generator=g))
        bn = "shared" if rng.integers(2) else "separate"
        with torch.no_grad():
            value = jsd_objective(disc, pairs, "standard", bn).value.item()
        worst = max(worst, value)
    ok = worst <= LN4 + 1e-6
    record_acceptance("C5 estimator bound", ok, f"max over 10000 trials {worst:.6f} <= ln 4 = {LN4:.6f}")
    assert ok


def _dataset_checks(bundle, tmp_path, tag):
    bias = float(np.mean(bundle.train.digit_labels == bundle.train.texture_labels))
    pvals = {}
    for name in ("val", "test"):
        split = bundle.split(name)
        table = np.zeros((10, 10))
        np.add.at(table, (split.digit_labels, split.texture_labels), 1)
        pvals[name] = stats.chi2_contingency(table).pvalue
    round_trip = True
    for name in ("train", "val", "test"):
        first, second = tmp_path / f"{tag}_{name}.smn", tmp_path / f"{tag}_{name}2.smn"
        write_split(bundle.split(name), first)
        again = read_split(first)
        write_split(again, second)
        round_trip &= again == bundle.split(name) and first.read_bytes() == second.read_bytes()
    return bias, pvals, round_trip


def test_c6_dataset_invariants(desk_bundle, tmp_path):
    details, ok = [], True
    if FULL_MNIST_DIR:
        tr, te = load_mnist(FULL_MNIST_DIR, "train"), load_mnist(FULL_MNIST_DIR, "t10k")
        source = "full MNIST"
    else:
        # full MNIST is not available offline; a 70000-image source with MNIST's
        # split sizes exercises the same construction at full scale
        rng = np.random.default_rng(5)
        real = load_mnist(bundled_mnist_dir(), "train")
        pick = lambda n: rng.integers(0, len(real.labels), n)
        i_tr, i_te = pick(60_000), pick(10_000)
        tr = data.LabeledImageSet(real.images[i_tr], real.labels[i_tr])
        te = data.LabeledImageSet(real.images[i_te], real.labels[i_te])
        source = "60000/10000 resample of the bundled digits"
    full = build_splits(tr, te, build_texture_bank("procedural", 0), seed=0)
    for tag, bundle in (("desk", desk_bundle), ("full", full)):
        bias, pvals, round_trip = _dataset_checks(bundle, tmp_path, tag)
        part = bias == 1.0 and min(pvals.values()) > 0.01 and round_trip
        ok &= part
        details.append(
            f"{tag}: bias {bias}, chi2 p val {pvals['val']:.3f} test {pvals['test']:.3f}, round trip {round_trip}"
        )
    ok &= len(full.val) == 12_000
    details.append(f"|val| = {len(full.val)} from {source}")
    record_acceptance("C6 dataset invariants", ok, "; ".join(details))
    assert ok


def _param_digest(model):
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


def test_c7_shape_and_protocol(tiny_bundle):
    checks = {}
    model = init_params(ClassifierConfig(), seed=0)
    taps = model(torch.rand(4, 1, 32, 32)).taps
    checks["taps"] = [tuple(t.shape) for t in taps] == [(4, 32, 16, 16), (4, 64, 8, 8), (4, 128, 4, 4), (4, 128, 2, 2)]

    widths = []
    for a, b in ((0, 1), (1, 2), (2, 3)):
        pairs = sample_pairs(taps[a], upsample_nearest(taps[b], taps[a].shape[-2:]), 8, torch.Generator().manual_seed(0))
        widths.append(pairs.joint.shape[1])
    checks["pair widths"] = widths == [96, 192, 256] == [d.config.input_width for d in IFMHead.for_channels((32, 64, 128, 128))]

    rng = np.random.default_rng(11)
    selection_ok = True
    for _ in range(500):
        n = int(rng.integers(1, 12))
        d = rng.integers(0, 4, n) / 4  # coarse values force ties
        t = rng.integers(0, 4, n) / 4
        hist = [type("R", (), {"val_digit_acc": a, "val_texture_acc": b}) for a, b in zip(d, t)]
        bd, bt = select_checkpoints(hist)
        selection_ok &= bd == int(np.flatnonzero(d == d.max())[0]) and bt == int(np.flatnonzero(t == t.max())[0])
    checks["selection"] = selection_ok

    cfg = TrainConfig(epochs=2, batch_size=32, pairs_per_image=8, lambda_ifm=0.0)
    trajectories = []
    for with_ifm in (True, False):
        digests = []
        train(cfg, tiny_bundle, with_ifm=with_ifm, step_callback=lambda *a, out=digests: out.append(_param_digest(a[-1].model)))
        trajectories.append(digests)
    checks["lambda=0 trajectory"] = trajectories[0] == trajectories[1] and len(trajectories[0]) > 0

    ok = all(checks.values())
    record_acceptance(
        "C7 shape and protocol invariants",
        ok,
        ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
        + f" ({len(trajectories[0])} steps compared)",
    )
    assert ok
