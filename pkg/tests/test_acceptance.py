"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The training-based
criteria (4, 5, 7) run multi-seed experiments at the pinned desk-scale
configuration below and dominate the runtime; everything else finishes in
seconds to a couple of minutes.
"""

import time

import numpy as np
import pytest

from morphfit import losses, metrics, storage
from morphfit.morphable import (
    ParamVec,
    project_2d,
    reconstruct_vertices,
    sample_landmarks,
    synthetic_basis,
)
from morphfit.regressor import (
    RegressorWeights,
    SgdConfig,
    TrainConfig,
    _stack_batch,
    backward_batch,
    batch_param_grads,
    forward_batch,
    init_weights,
    predict_landmarks,
    prepare_pool,
    train_supervised,
)
from morphfit.synthesis import PerturbRanges, inplane_transform, synthesize_clip

from conftest import make_arbitrary_params, make_similarity_params, rel_err

# ---------------------------------------------------------------------------
# Pinned desk-scale experiment configuration (criteria 4, 5, 7).
# ---------------------------------------------------------------------------
DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_BASIS_SEED = 1
DESK_DATA_SEED = 2
DESK_LR = 1e-3
DESK_BATCH = 32
DESK_GAIN = 8.0
DESK_ITERS = 8000
DESK_K = 10
DESK_HIDDEN = 64
DESK_FRAME = 32
DESK_POOL = 2000

FIELDS = ("w_hidden", "b_hidden", "w_param", "b_param", "w_lmk", "b_lmk")


def _report(ok: bool, name: str, detail: str = ""):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def desk_world():
    basis = synthetic_basis(500, 40, 10, seed=DESK_BASIS_SEED)
    manifest = storage.generate_dataset(basis, DESK_POOL + 100, seed=DESK_DATA_SEED)
    pool = prepare_pool(basis, manifest.params[:DESK_POOL], manifest.stats, DESK_FRAME)
    held_out = manifest.params[DESK_POOL:]
    return basis, manifest, pool, held_out


def desk_config(iterations=DESK_ITERS, svs=None):
    return TrainConfig(
        sgd=SgdConfig(learning_rate=DESK_LR, batch_size=DESK_BATCH),
        iterations=iterations,
        eval_every=max(1, iterations // 4),
        hidden_dim=DESK_HIDDEN,
        meta_k=DESK_K,
        vdc_step_gain=DESK_GAIN,
        svs_ranges=svs,
    )


@pytest.fixture(scope="module")
def desk_runs(desk_world):
    """All six training modes at the pinned config, five seeds."""
    _, _, pool, _ = desk_world
    modes = ("vdc", "fwpdc", "vdc_from_fwpdc", "vanilla_joint", "meta_joint", "meta_joint_lrr")
    runs = {m: [] for m in modes}
    for seed in DESK_SEEDS:
        for mode in modes:
            runs[mode].append(train_supervised(pool, mode, desk_config(), seed=seed))
    return runs


# ---------------------------------------------------------------------------
# Criterion 1: fWPDC agrees with the brute-force weights everywhere.
# ---------------------------------------------------------------------------


def test_criterion_1_fwpdc_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    sizes = [(5, 3, 1), (5, 8, 2), (50, 3, 1), (50, 8, 2), (50, 40, 10),
             (500, 3, 1), (500, 8, 2), (500, 40, 10),
             (10000, 3, 1), (10000, 8, 2), (10000, 40, 10), (10000, 40, 10)]
    worst = 0.0
    count = 0
    for combo, (n, d_id, d_exp) in enumerate(sizes):
        basis = synthetic_basis(n, d_id, d_exp, seed=100 + combo)
        for _ in range(17):
            p = make_arbitrary_params(basis, rng)
            p_gt = make_similarity_params(basis, rng)
            naive = losses.wpdc_naive(basis, p, p_gt).value
            fast = losses.fwpdc(basis, p, p_gt).value
            worst = max(worst, abs(fast - naive) / max(naive, 1e-12))
            count += 1
    elapsed = time.perf_counter() - start
    _report(
        worst <= 1e-9 and count >= 200 and elapsed < 60.0,
        "criterion 1 (fwpdc correctness)",
        f"{count} instances, worst rel dev {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 2: fWPDC speedup at batch 128, N=10000, D=50.
# ---------------------------------------------------------------------------


def test_criterion_2_fwpdc_speedup():
    start = time.perf_counter()
    basis = synthetic_basis(10000, 40, 10, seed=11)
    rng = np.random.default_rng(12)
    pairs = [
        (make_arbitrary_params(basis, rng), make_similarity_params(basis, rng))
        for _ in range(128)
    ]
    params = np.stack([p.to_vector() for p, _ in pairs])
    params_gt = np.stack([g.to_vector() for _, g in pairs])

    naive_times, fast_times = [], []
    naive_vals = fast_vals = None
    for _ in range(10):
        t0 = time.perf_counter()
        naive_vals = np.array([losses.wpdc_naive(basis, p, g).value for p, g in pairs])
        t1 = time.perf_counter()
        fast_vals, _ = losses.fwpdc_batch(basis, params, params_gt)
        t2 = time.perf_counter()
        naive_times.append(t1 - t0)
        fast_times.append(t2 - t1)
    speedup = float(np.median(naive_times) / np.median(fast_times))
    deviation = float(np.max(np.abs(fast_vals - naive_vals) / np.maximum(naive_vals, 1e-12)))
    elapsed = time.perf_counter() - start
    _report(
        speedup >= 5.0 and deviation <= 1e-9 and elapsed < 120.0,
        "criterion 2 (fwpdc speedup)",
        f"speedup {speedup:.1f}x, deviation {deviation:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 3: analytic gradients match central finite differences.
# ---------------------------------------------------------------------------


def _fd(fn, vec, h=1e-5):
    grad = np.empty_like(vec)
    for i in range(vec.size):
        hi = vec.copy(); hi[i] += h
        lo = vec.copy(); lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def test_criterion_3_gradient_integrity():
    start = time.perf_counter()
    basis = synthetic_basis(20, 4, 2, seed=13)
    rng = np.random.default_rng(14)
    cfg = losses.JointConfig(beta=0.5)
    worst = {"vdc": 0.0, "fwpdc": 0.0, "vanilla_joint": 0.0, "lrr": 0.0, "network": 0.0}

    for _ in range(50):
        p = make_arbitrary_params(basis, rng)
        p_gt = make_similarity_params(basis, rng)
        vec0 = p.to_vector()

        out = losses.vdc(basis, p, p_gt)
        fd = _fd(lambda v: losses.vdc(basis, ParamVec.from_vector(v), p_gt).value, vec0)
        worst["vdc"] = max(worst["vdc"], rel_err(out.grad, fd))

        w = losses.fwpdc_weights(basis, p, p_gt)
        out = losses.fwpdc(basis, p, p_gt)
        fd = _fd(
            lambda v: losses.weighted_param_loss(w, ParamVec.from_vector(v), p_gt).value,
            vec0,
        )
        worst["fwpdc"] = max(worst["fwpdc"], rel_err(out.grad, fd))

        fast = losses.fwpdc(basis, p, p_gt)
        vert = losses.vdc(basis, p, p_gt)
        ratio = abs(fast.value) / max(abs(vert.value), cfg.epsilon_ratio)
        out = losses.vanilla_joint(basis, p, p_gt, cfg)
        fd = _fd(
            lambda v: (
                cfg.beta
                * losses.weighted_param_loss(w, ParamVec.from_vector(v), p_gt).value
                + (1 - cfg.beta)
                * ratio
                * losses.vdc(basis, ParamVec.from_vector(v), p_gt).value
            ),
            vec0,
        )
        worst["vanilla_joint"] = max(worst["vanilla_joint"], rel_err(out.grad, fd))

        pred = rng.standard_normal(136) * 10.0
        gt = rng.standard_normal(136) * 10.0
        out = losses.landmark_regression_loss(pred, gt)
        fd = _fd(lambda v: losses.landmark_regression_loss(v, gt).value, pred)
        worst["lrr"] = max(worst["lrr"], rel_err(out.grad, fd))

    # End-to-end: loss -> heads -> weights on a miniature network.
    mini_basis = synthetic_basis(40, 4, 2, seed=15)
    prior = storage.ParamPrior(scale_range=(0.1, 0.15), frame_size=4, center_jitter=0.25)
    manifest = storage.generate_dataset(mini_basis, 8, prior=prior, seed=16)
    pool = prepare_pool(mini_basis, manifest.params, manifest.stats, 4)
    for inst in range(50):
        mode = ("vdc", "fwpdc", "vanilla_joint")[inst % 3]
        lrr = inst % 2 == 0
        weights = init_weights(16, 4, pool.basis.n_params, 136, rng)
        batch = [pool.samples[i] for i in rng.choice(len(pool), 3, replace=False)]
        worst["network"] = max(
            worst["network"], _network_fd_error(pool, weights, batch, mode, lrr, rng)
        )

    ok = all(v <= 1e-4 for v in worst.values())
    elapsed = time.perf_counter() - start
    _report(
        ok and elapsed < 120.0,
        "criterion 3 (gradient integrity)",
        ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s",
    )


def _network_fd_error(pool, weights, batch, mode, lrr, rng):
    cfg = TrainConfig(joint=losses.JointConfig(beta=0.5))
    images, params_gt, v_gt, lmk_gt, row_norms, scales = _stack_batch(batch)
    b = images.shape[0]
    sigma, mu = pool.stats.sigma, pool.stats.mu

    p_norm, lmk_pred, cache = forward_batch(weights, images)
    params_pred = p_norm * sigma + mu
    t_pred = params_pred[:, :12].reshape(b, 3, 4)
    a_pred = params_pred[:, 12:]
    values, grads_p = batch_param_grads(
        mode, pool.basis, t_pred, a_pred, params_pred, params_gt,
        v_gt, row_norms, scales, cfg.joint, cfg.vdc_step_gain,
    )
    grad_p_norm = grads_p * sigma[None, :] / b
    if lrr:
        diff = lmk_pred - lmk_gt
        n_l = diff.shape[1]
        lrr_values = np.einsum("bi,bi->b", diff, diff) / n_l
        lrr_ratio = abs(float(values.mean())) / max(abs(float(lrr_values.mean())), 1e-12)
        grad_lmk = lrr_ratio * (2.0 / n_l) * diff / b
    else:
        lrr_ratio = 0.0
        grad_lmk = np.zeros_like(lmk_pred)
    analytic = backward_batch(weights, cache, grad_p_norm, grad_lmk)

    frozen_w = np.stack([
        losses.fwpdc_weights(
            pool.basis,
            ParamVec.from_vector(params_pred[i]),
            ParamVec.from_vector(params_gt[i]),
        )
        for i in range(b)
    ])
    if mode == "vanilla_joint":
        vf, _ = losses.fwpdc_batch(pool.basis, params_pred, params_gt, row_norms, scales)
        vv, _ = losses.vdc_batch(pool.basis, t_pred, a_pred, v_gt)
        joint_ratios = np.abs(vf) / np.maximum(np.abs(vv), cfg.joint.epsilon_ratio)

    def loss_at(w2):
        p_n, l_p, _ = forward_batch(w2, images)
        pp = p_n * sigma + mu
        tt = pp[:, :12].reshape(b, 3, 4)
        aa = pp[:, 12:]
        dp = pp - params_gt
        if mode == "vdc":
            vals, _ = losses.vdc_batch(pool.basis, tt, aa, v_gt)
            vals = vals * cfg.vdc_step_gain / (3.0 * pool.basis.n_vertices)
        elif mode == "fwpdc":
            vals = np.einsum("bi,bi->b", frozen_w * dp, frozen_w * dp)
        else:
            vals_f = np.einsum("bi,bi->b", frozen_w * dp, frozen_w * dp)
            vals_v, _ = losses.vdc_batch(pool.basis, tt, aa, v_gt)
            vals = cfg.joint.beta * vals_f + (1 - cfg.joint.beta) * joint_ratios * vals_v
        total = float(vals.mean())
        if lrr:
            d = l_p - lmk_gt
            total += lrr_ratio * float((np.einsum("bi,bi->b", d, d) / d.shape[1]).mean())
        return total

    h = 1e-5
    an_list, fd_list = [], []
    for name in FIELDS:
        arr = getattr(weights, name)
        for idx in rng.choice(arr.size, size=min(4, arr.size), replace=False):
            bumped = {f: getattr(weights, f).copy() for f in FIELDS}
            bumped[name].reshape(-1)[idx] += h
            hi = loss_at(RegressorWeights(**bumped))
            bumped[name].reshape(-1)[idx] -= 2 * h
            lo = loss_at(RegressorWeights(**bumped))
            fd_list.append((hi - lo) / (2 * h))
            an_list.append(getattr(analytic, name).reshape(-1)[idx])
    return rel_err(np.array(an_list), np.array(fd_list))


# ---------------------------------------------------------------------------
# Criterion 4: convergence ordering of the six training recipes.
# ---------------------------------------------------------------------------


def test_criterion_4_convergence_ordering(desk_runs):
    start = time.perf_counter()
    med = {
        mode: float(np.median([r.error_curve[-1, 1] for r in runs]))
        for mode, runs in desk_runs.items()
    }
    tol = 1.02  # ties allowed at 2% on the weak links
    ok = (
        med["vdc"] > med["fwpdc"]
        and med["fwpdc"] > med["vdc_from_fwpdc"]
        and med["vanilla_joint"] <= med["vdc_from_fwpdc"] * tol
        and med["meta_joint"] <= med["vanilla_joint"] * tol
        and med["meta_joint_lrr"] <= med["meta_joint"] * tol
    )
    elapsed = time.perf_counter() - start
    _report(
        ok,
        "criterion 4 (convergence ordering)",
        " > ".join(f"{m}={med[m]:.3f}" for m in (
            "vdc", "fwpdc", "vdc_from_fwpdc", "vanilla_joint", "meta_joint", "meta_joint_lrr",
        )) + f" ({elapsed:.0f}s marginal)",
    )


# ---------------------------------------------------------------------------
# Criterion 5: selector trend in the look-ahead runs.
# ---------------------------------------------------------------------------


def test_criterion_5_selector_trend(desk_runs):
    early, late = [], []
    for run in desk_runs["meta_joint"]:
        chosen = [rec.chosen for rec in run.selector_trace]
        q = max(1, len(chosen) // 4)
        early.append(np.mean([c == "fwpdc" for c in chosen[:q]]))
        late.append(np.mean([c == "vdc" for c in chosen[-q:]]))
    med_early = float(np.median(early))
    med_late = float(np.median(late))
    _report(
        med_early > 0.5 and med_late > 0.5,
        "criterion 5 (selector trend)",
        f"early fwpdc fraction {med_early:.2f} (per-seed {np.round(early, 2)}), "
        f"late vdc fraction {med_late:.2f} (per-seed {np.round(late, 2)})",
    )


# ---------------------------------------------------------------------------
# Criterion 6: synthesis label consistency.
# ---------------------------------------------------------------------------


def test_criterion_6_synthesis_consistency():
    start = time.perf_counter()
    basis = synthetic_basis(300, 40, 10, seed=17)
    manifest = storage.generate_dataset(basis, 100, seed=18)
    rng = np.random.default_rng(19)
    ranges = PerturbRanges()  # stock perturbation settings, n_frames=8
    worst_label = 0.0
    worst_commute = 0.0
    for p in manifest.params:
        clip = synthesize_clip(basis, p, ranges, rng)
        assert len(clip) == 8
        for frame in clip.frames:
            recomputed = sample_landmarks(
                project_2d(reconstruct_vertices(basis, frame.params)), basis
            )
            worst_label = max(worst_label, float(np.max(np.abs(recomputed - frame.landmarks))))
        # In-plane commutation: parameter-space similarity equals the 2D one.
        ds, dth = rng.uniform(0.95, 1.05), rng.uniform(-3, 3)
        dt = rng.uniform(-5, 5, 2)
        moved = inplane_transform(p, scale=ds, rot_deg=dth, tx=dt[0], ty=dt[1])
        l0 = sample_landmarks(project_2d(reconstruct_vertices(basis, p)), basis).reshape(-1, 2)
        l1 = sample_landmarks(project_2d(reconstruct_vertices(basis, moved)), basis).reshape(-1, 2)
        th = np.radians(dth)
        rot = ds * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        worst_commute = max(worst_commute, float(np.max(np.abs(l1 - (l0 @ rot.T + dt)))))
    elapsed = time.perf_counter() - start
    _report(
        worst_label <= 1e-9 and worst_commute <= 1e-9,
        "criterion 6 (synthesis consistency)",
        f"label err {worst_label:.2e}, commutation err {worst_commute:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 7: short-video synthesis improves stability.
# ---------------------------------------------------------------------------


def test_criterion_7_stability_direction(desk_world):
    start = time.perf_counter()
    basis, manifest, pool, held_out = desk_world
    wins = 0
    details = []
    for seed in DESK_SEEDS:
        stab = {}
        for svs in (False, True):
            cfg = desk_config(iterations=3000, svs=manifest.ranges if svs else None)
            result = train_supervised(pool, "fwpdc", cfg, seed=seed)
            rng = np.random.default_rng(900 + seed)
            values = []
            for p in held_out[:40]:
                clip = synthesize_clip(basis, p, manifest.ranges, rng, DESK_FRAME, DESK_FRAME)
                preds = np.stack([
                    predict_landmarks(basis, result.weights, pool.stats, f.image.reshape(-1))
                    for f in clip.frames
                ])
                gts = np.stack([f.landmarks for f in clip.frames])
                values.append(metrics.stability(preds, gts))
            stab[svs] = float(np.mean(values))
        wins += stab[True] <= stab[False]
        details.append(f"s{seed}:{stab[False]:.2f}/{stab[True]:.2f}")
    elapsed = time.perf_counter() - start
    _report(
        wins >= 3,
        "criterion 7 (svs stability direction)",
        f"{wins}/5 seeds improved (no-svs/svs: {' '.join(details)}), {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 8: metric sanity.
# ---------------------------------------------------------------------------


def test_criterion_8_metric_sanity():
    checks = []

    gt = np.zeros(136)
    gt[0::2] = np.linspace(0.0, 100.0, 68)
    gt[1::2] = np.linspace(0.0, 100.0, 68)[::-1]
    checks.append(metrics.nme_sparse(gt, gt) == 0.0)

    pred = gt.copy()
    pred[0::2] += 3.0
    pred[1::2] += 4.0
    checks.append(abs(metrics.nme_sparse(pred, gt) - 5.0) < 1e-12)

    single = np.array([10.0, 20.0])
    checks.append(
        abs(
            metrics.nme_sparse(
                np.array([13.0, 24.0]), single, metrics.NORMALIZER_INTEROCULAR,
                normalizer=50.0,
            )
            - 10.0
        )
        < 1e-12
    )
    checks.append(
        abs(metrics.nme_sparse(np.array([0.3, 0.4]), np.array([0.0, 0.0]),
                               normalizer=1.0) - 50.0) < 1e-12
    )

    rng = np.random.default_rng(20)
    coords = rng.standard_normal((3, 50))
    from morphfit.morphable import VertexSet

    v = VertexSet(coords3d=coords)
    checks.append(metrics.nme_dense(v, v, normalizer=3.0) == 0.0)
    offset = np.zeros((3, 1)); offset[1] = 4.0
    checks.append(
        abs(metrics.nme_dense(VertexSet(coords3d=coords + offset), v, normalizer=4.0) - 100.0)
        < 1e-9
    )

    seq_gt = np.stack([gt] * 4)
    checks.append(metrics.stability(seq_gt + 7.25, seq_gt) == 0.0)
    jitter = np.tile([1.0, 0.0], 68)
    pred_seq = np.stack([gt + jitter * (1 if t % 2 == 0 else -1) for t in range(4)])
    checks.append(abs(metrics.stability(pred_seq, seq_gt) - 2.0) < 1e-12)
    checks.append(metrics.stability(seq_gt, seq_gt) == 0.0)

    _report(all(checks), "criterion 8 (metric sanity)", f"{sum(checks)}/{len(checks)} checks")


# ---------------------------------------------------------------------------
# Criterion 9: format robustness under fuzzing.
# ---------------------------------------------------------------------------


def test_criterion_9_format_robustness():
    start = time.perf_counter()
    basis = synthetic_basis(60, 6, 3, seed=21)
    blob = storage.serialize_basis(basis)

    # Lossless round-trips first.
    assert storage.serialize_basis(storage.parse_basis(blob)) == blob
    manifest = storage.generate_dataset(basis, 5, seed=22)
    assert storage.serialize_manifest(
        storage.parse_manifest(storage.serialize_manifest(manifest))
    ) == storage.serialize_manifest(manifest)
    rng = np.random.default_rng(23)
    weights = init_weights(16, 4, basis.n_params, 136, rng)
    ck = storage.serialize_checkpoint(weights, manifest.stats)
    assert storage.serialize_checkpoint(*storage.parse_checkpoint(ck)) == ck

    failures = 0
    for trial in range(10000):
        mutated = bytearray(blob)
        action = rng.random()
        if action < 0.4:
            mutated = mutated[: rng.integers(0, len(blob))]
        elif action < 0.8:
            for _ in range(rng.integers(1, 8)):
                mutated[rng.integers(0, len(mutated))] = rng.integers(0, 256)
        else:
            mutated += bytes(rng.integers(0, 256, size=rng.integers(1, 32)))
        try:
            storage.parse_basis(bytes(mutated))
        except storage.ParseError:
            pass
        except Exception:  # anything else is a robustness failure
            failures += 1
    elapsed = time.perf_counter() - start
    _report(
        failures == 0,
        "criterion 9 (format robustness)",
        f"10000 fuzzed inputs, {failures} escapes, {elapsed:.1f}s",
    )
