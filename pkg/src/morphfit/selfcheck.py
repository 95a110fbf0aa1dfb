"""Built-in consistency checks behind the ``selfcheck`` CLI command.

Compact re-verification of the core numeric contracts: brute-force oracle
agreement, finite-difference gradient checks, serialization round-trips, and
the label-consistency invariants of clip synthesis. Each check returns
(name, ok, detail).
"""

from __future__ import annotations

import numpy as np

from . import losses, metrics, storage
from .lookahead import SelectorRecord, export_trace, parse_trace
from .morphable import (
    ParamVec,
    denormalize_params,
    normalize_params,
    project_2d,
    reconstruct_vertices,
    render_pointsplat,
    sample_landmarks,
    synthetic_basis,
)
from .regressor import (
    WeightArrays,
    backward,
    forward,
    init_weights,
)
from .synthesis import (
    PerturbRanges,
    apply_motion_blur,
    inplane_transform,
    synthesize_clip,
)


def _random_pair(basis, rng, similarity_gt=True):
    p = storage.sample_params(basis, storage.ParamPrior(), rng)
    if similarity_gt:
        gt = storage.sample_params(basis, storage.ParamPrior(), rng)
    else:
        gt = ParamVec(
            transform=rng.standard_normal((3, 4)),
            alpha=rng.standard_normal(basis.n_dims),
        )
    return p, gt


def _fd_grad(fn, vec, h=1e-5):
    grad = np.empty_like(vec)
    for i in range(vec.size):
        hi = vec.copy()
        lo = vec.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def check_reconstruction_oracle():
    rng = np.random.default_rng(11)
    basis = synthetic_basis(6, 3, 1, seed=3)
    p, _ = _random_pair(basis, rng)
    v = reconstruct_vertices(basis, p).coords3d
    shape = basis.mean_shape + (basis.basis @ p.alpha).reshape(3, -1)
    ref = np.zeros_like(v)
    for r in range(3):
        for k in range(basis.n_vertices):
            acc = p.transform[r, 3]
            for c in range(3):
                acc += p.transform[r, c] * shape[c, k]
            ref[r, k] = acc
    err = np.max(np.abs(v - ref)) / max(np.max(np.abs(ref)), 1e-300)
    return "reconstruction_oracle", err <= 1e-12, f"rel err {err:.2e}"


def check_normalize_round_trip():
    rng = np.random.default_rng(5)
    basis = synthetic_basis(30, 5, 2, seed=1)
    manifest = storage.generate_dataset(basis, 16, seed=7)
    p = manifest.params[0]
    back = denormalize_params(normalize_params(p, manifest.stats), manifest.stats)
    err = np.max(np.abs(back.to_vector() - p.to_vector()))
    scale = np.max(np.abs(p.to_vector()))
    return "normalize_round_trip", err <= 1e-12 * max(scale, 1.0), f"abs err {err:.2e}"


def check_fwpdc_oracle_agreement():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n, d_id, d_exp in ((5, 3, 1), (50, 8, 2), (200, 40, 10)):
        basis = synthetic_basis(n, d_id, d_exp, seed=n)
        for _ in range(7):
            p, gt = _random_pair(basis, rng)
            naive = losses.wpdc_naive(basis, p, gt).value
            fast = losses.fwpdc(basis, p, gt).value
            worst = max(worst, abs(fast - naive) / max(naive, 1e-12))
    return "fwpdc_oracle_agreement", worst <= 1e-9, f"rel err {worst:.2e}"


def check_gradients():
    rng = np.random.default_rng(3)
    basis = synthetic_basis(12, 4, 2, seed=9)
    worst = 0.0
    for _ in range(5):
        p, gt = _random_pair(basis, rng)
        vec0 = p.to_vector()

        out = losses.vdc(basis, p, gt)
        fd = _fd_grad(lambda v: losses.vdc(basis, ParamVec.from_vector(v), gt).value, vec0)
        worst = max(worst, np.max(np.abs(out.grad - fd)) / max(np.max(np.abs(fd)), 1e-12))

        w = losses.fwpdc_weights(basis, p, gt)
        out = losses.fwpdc(basis, p, gt)
        fd = _fd_grad(
            lambda v: losses.weighted_param_loss(w, ParamVec.from_vector(v), gt).value, vec0
        )
        worst = max(worst, np.max(np.abs(out.grad - fd)) / max(np.max(np.abs(fd)), 1e-12))
    return "loss_gradients_fd", worst <= 1e-4, f"rel err {worst:.2e}"


def check_network_gradients():
    rng = np.random.default_rng(4)
    w = init_weights(16, 4, 6, 8, rng)
    x = rng.uniform(0.0, 1.0, 16)
    gp = rng.standard_normal(6)
    gl = rng.standard_normal(8)
    p0, l0, cache = forward(w, x)
    grads = backward(w, cache, gp, gl)

    def loss_of(weights):
        p, l, _ = forward(weights, x)
        return float(gp @ p + gl @ l)

    worst = 0.0
    for name in ("w_hidden", "b_hidden", "w_param", "b_param", "w_lmk", "b_lmk"):
        arr = getattr(w, name)
        g = getattr(grads, name)
        flat = arr.reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 8)):
            h = 1e-6
            hi = {f: getattr(w, f).copy() for f in (
                "w_hidden", "b_hidden", "w_param", "b_param", "w_lmk", "b_lmk")}
            lo = {f: v.copy() for f, v in hi.items()}
            hi[name].reshape(-1)[idx] += h
            lo[name].reshape(-1)[idx] -= h
            from .regressor import RegressorWeights

            fd = (loss_of(RegressorWeights(**hi)) - loss_of(RegressorWeights(**lo))) / (2 * h)
            an = g.reshape(-1)[idx]
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-9))
    return "network_gradients_fd", worst <= 1e-4, f"rel err {worst:.2e}"


def check_render_and_blur():
    v = project_2d(
        reconstruct_vertices(
            synthetic_basis(1, 0, 0, seed=0),
            ParamVec(transform=np.hstack([np.eye(3), np.array([[16.0], [16.0], [0.0]])]),
                     alpha=np.zeros(0)),
        )
    )
    img = render_pointsplat(v, 32, 32)
    ok = img.sum() == 1.0 and img.max() == 1.0
    delta = np.zeros((9, 9))
    delta[4, 4] = 1.0
    blurred = apply_motion_blur(delta, 0.0, 3)
    row = blurred[4, 3:6]
    ok = ok and np.allclose(row, 1.0 / 3.0) and np.isclose(blurred.sum(), 1.0)
    return "render_and_blur", bool(ok), "hand cases"


def check_synthesis_labels():
    rng = np.random.default_rng(6)
    basis = synthetic_basis(80, 6, 2, seed=8)
    manifest = storage.generate_dataset(basis, 4, seed=3)
    worst = 0.0
    for p in manifest.params[:2]:
        clip = synthesize_clip(basis, p, PerturbRanges(n_frames=4), rng)
        for frame in clip.frames:
            lmk = sample_landmarks(
                project_2d(reconstruct_vertices(basis, frame.params)), basis
            )
            worst = max(worst, np.max(np.abs(lmk - frame.landmarks)))
        # Projected landmarks must transform by exactly the 2D similarity.
        moved = inplane_transform(p, scale=1.03, rot_deg=2.0, tx=1.5, ty=-0.5)
        lmk0 = sample_landmarks(project_2d(reconstruct_vertices(basis, p)), basis).reshape(-1, 2)
        lmk1 = sample_landmarks(project_2d(reconstruct_vertices(basis, moved)), basis).reshape(-1, 2)
        th = np.radians(2.0)
        rot = 1.03 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        ref = lmk0 @ rot.T + np.array([1.5, -0.5])
        worst = max(worst, np.max(np.abs(lmk1 - ref)))
    return "synthesis_labels", worst <= 1e-9, f"max abs err {worst:.2e}"


def check_metrics_hand_cases():
    gt = np.zeros(136)
    gt[0::2] = np.tile(np.linspace(0.0, 100.0, 68), 1)
    gt[1::2] = np.linspace(0.0, 100.0, 68)[::-1]
    pred = gt.copy()
    pred[0::2] += 3.0
    pred[1::2] += 4.0
    nme = metrics.nme_sparse(pred, gt, metrics.NORMALIZER_BBOX)
    ok = abs(nme - 5.0) < 1e-12
    seq_gt = np.stack([gt, gt, gt])
    seq_pred = np.stack([gt + 7.0, gt + 7.0, gt + 7.0])
    ok = ok and metrics.stability(seq_pred, seq_gt) == 0.0
    return "metrics_hand_cases", bool(ok), f"nme {nme:.6f}"


def check_round_trips():
    rng = np.random.default_rng(12)
    basis = synthetic_basis(40, 4, 2, seed=2)
    ok = storage.parse_basis(storage.serialize_basis(basis)).mean_shape.tobytes() == basis.mean_shape.tobytes()

    w = init_weights(16, 4, basis.n_params, 136, rng)
    manifest = storage.generate_dataset(basis, 4, seed=5)
    data = storage.serialize_checkpoint(w, manifest.stats)
    w2, stats2 = storage.parse_checkpoint(data)
    ok = ok and w2.w_hidden.tobytes() == w.w_hidden.tobytes()
    ok = ok and stats2.mu.tobytes() == manifest.stats.mu.tobytes()

    m2 = storage.parse_manifest(storage.serialize_manifest(manifest))
    ok = ok and all(
        np.array_equal(a.to_vector(), b.to_vector())
        for a, b in zip(m2.params, manifest.params)
    )

    trace = (SelectorRecord(0, "fwpdc", 1.5, 2.5), SelectorRecord(1, "vdc", 0.25, 0.125))
    ok = ok and parse_trace(export_trace(trace)) == trace

    clip = synthesize_clip(basis, manifest.params[0], PerturbRanges(n_frames=3), rng)
    clips2 = storage.parse_clips(storage.serialize_clips([clip]))
    ok = ok and np.array_equal(
        clips2[0].frames[1].params.to_vector(), clip.frames[1].params.to_vector()
    )

    report = metrics.EvalReport(
        nme_mean=1.25, per_sample_nme=np.array([1.0, 1.5]),
        normalizer_kind=metrics.NORMALIZER_BBOX, stability=0.5,
    )
    r2 = storage.parse_report(storage.serialize_report(report))
    ok = ok and r2.nme_mean == report.nme_mean and np.array_equal(
        r2.per_sample_nme, report.per_sample_nme
    )
    return "serialization_round_trips", bool(ok), "bitwise/value-exact"


def check_fuzzed_parsers():
    rng = np.random.default_rng(13)
    basis = synthetic_basis(20, 3, 1, seed=4)
    blob = bytearray(storage.serialize_basis(basis))
    for _ in range(300):
        mutated = bytearray(blob)
        if rng.random() < 0.5:
            mutated = mutated[: rng.integers(0, len(blob))]
        else:
            for _ in range(rng.integers(1, 6)):
                mutated[rng.integers(0, len(mutated))] = rng.integers(0, 256)
        try:
            storage.parse_basis(bytes(mutated))
        except storage.ParseError:
            pass
        except Exception as exc:  # any other escape is a failure
            return "fuzzed_parsers", False, f"{type(exc).__name__}: {exc}"
    return "fuzzed_parsers", True, "300 mutations"


def run_all():
    checks = (
        check_reconstruction_oracle,
        check_normalize_round_trip,
        check_fwpdc_oracle_agreement,
        check_gradients,
        check_network_gradients,
        check_render_and_blur,
        check_synthesis_labels,
        check_metrics_hand_cases,
        check_round_trips,
        check_fuzzed_parsers,
    )
    return [fn() for fn in checks]
