"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with the measured values (run with -s to see them live).

Criterion 4(b) is asserted exactly as stated and is expected to fail: the
per-repetition bound estimators carry an irreducible sampling spread of
about 1.25/sqrt(m) in the whitened eigenvalues, so at m = 50 the voxel
means sit near 1.19/0.72 rather than inside [0.85, 1.15]. See the README
for the analysis; the test reports the measured means.
"""

import hashlib
import time

import numpy as np
import pytest

from aslmcrb.bounds import congruence_metric, crb_theoretical, mcrb_sandwich
from aslmcrb.cli import cli_main
from aslmcrb.dataset import read_dataset, write_dataset
from aslmcrb.errors import FormatError, SizeMismatch
from aslmcrb.experiments import (
    REF_TRUTH,
    bootstrap_var_crb_ratio,
    convergence_study,
    subset_consistency,
    t1_experiment,
)
from aslmcrb.fitting import BoundsBox, fit_map
from aslmcrb.kinetic import (
    KineticParams,
    Protocol,
    batch_curves,
    buxton_signal,
    buxton_signal_oracle,
    default_plds,
    jacobian,
    model_hessians,
    sample_times,
    signal_curve,
)
from aslmcrb.noise import GAUSSIAN, RICIAN, NoiseSpec, add_noise
from aslmcrb.phantom import (
    GEN_BUXTON,
    GEN_OUTFLOW,
    GEN_WRONG_T1,
    PhantomSpec,
    clean_curves,
    draw_truths,
    generate_phantom,
    sigma_for_snr,
)


def report(criterion, ok, detail):
    import conftest
    state = "PASS" if ok else "FAIL"
    line = f"[{state}] acceptance {criterion}: {detail}"
    print("\n" + line, flush=True)
    conftest.ACCEPTANCE_RESULTS.append(line)
    return ok


def make_protocol(sigma, t1=1.2):
    return Protocol(plds=default_plds(), tau=1.5, sigma=sigma, t1_tissue=t1)


def gaussian_phantom(n_voxels, m_total, seed, snr=20.0, f_hi=150.0, t1=1.2):
    """Well-specified Gaussian phantom at peak-signal SNR."""
    spec = PhantomSpec(n_voxels=n_voxels, f_range=(0.0, f_hi),
                       att_range=(0.0, 2.0), generator=GEN_BUXTON,
                       m_total=m_total, seed=seed)
    proto = make_protocol(sigma=1.0, t1=t1)
    f, att = draw_truths(spec)
    curves, _ = clean_curves(spec, proto, f, att)
    sigma = sigma_for_snr(curves, snr)
    proto = make_protocol(sigma=sigma, t1=t1)
    spec = PhantomSpec(n_voxels=n_voxels, f_range=(0.0, f_hi),
                       att_range=(0.0, 2.0), generator=GEN_BUXTON,
                       m_total=m_total, seed=seed,
                       noise=NoiseSpec(sigma=sigma, kind=GAUSSIAN, seed=seed))
    return generate_phantom(spec, proto), proto


def test_criterion_1_forward_model_oracle_equivalence(brain_protocol):
    """Closed form vs quadrature oracle (n_grid = 1e5): rel err <= 1e-6 on
    1,000 random draws across brain and kidney ranges, in under 10 s."""
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    n = 1000
    f = np.where(g.random(n) < 0.5, g.uniform(0.0, 150.0, n),
                 g.uniform(0.0, 900.0, n))
    att = g.uniform(0.0, 2.0, n)
    t = g.uniform(0.0, 3.0, n)
    scale = 0.02  # typical peak amplitude at these settings
    worst = 0.0
    for i in range(n):
        p = KineticParams(float(f[i]), float(att[i]))
        a = buxton_signal(p, brain_protocol, float(t[i]))
        b = buxton_signal_oracle(p, brain_protocol, float(t[i]),
                                 n_grid=100_000)
        err = abs(a - b) / max(abs(b), 1e-12 * scale)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10.0
    assert report("1 (oracle equivalence)", ok,
                  f"worst rel err {worst:.3g} (tol 1e-6), {elapsed:.1f}s")


def test_criterion_2_derivative_correctness(brain_protocol):
    """Jacobian within 1e-4 and Hessians within 1e-3 of central finite
    differences on 200 interior points, in under 10 s."""
    t0 = time.perf_counter()
    g = np.random.default_rng(202)
    times = sample_times(brain_protocol)
    worst_j = worst_h = 0.0
    checked = 0
    while checked < 200:
        f = float(g.uniform(5.0, 145.0))
        att = float(g.uniform(0.05, 1.95))
        d = min(np.min(np.abs(times - att)),
                np.min(np.abs(times - att - brain_protocol.tau)))
        if d < 5e-3:
            continue
        p = KineticParams(f, att)
        jac = jacobian(p, brain_protocol)
        hf, ha = 1e-4 * max(f, 1.0), 1e-4 * max(att, 1.0)

        def curve(ff, aa):
            return signal_curve(KineticParams(ff, aa), brain_protocol)

        fd_f = (curve(f + hf, att) - curve(f - hf, att)) / (2 * hf)
        fd_a = (curve(f, att + ha) - curve(f, att - ha)) / (2 * ha)
        for col, fd in ((jac[:, 0], fd_f), (jac[:, 1], fd_a)):
            s = np.max(np.abs(fd))
            if s == 0.0:
                continue
            m = np.abs(fd) > 1e-9 * s
            if m.any():
                worst_j = max(worst_j, np.max(np.abs(col - fd)[m]
                                              / np.abs(fd)[m]))
        hes = model_hessians(p, brain_protocol)
        hf2 = 1e-3 * max(f, 1.0)
        c0 = curve(f, att)
        d_ff = (curve(f + hf2, att) - 2 * c0 + curve(f - hf2, att)) / hf2 ** 2
        d_aa = (curve(f, att + ha) - 2 * c0 + curve(f, att - ha)) / ha ** 2
        d_fa = (curve(f + hf2, att + ha) - curve(f + hf2, att - ha)
                - curve(f - hf2, att + ha) + curve(f - hf2, att - ha)) \
            / (4 * hf2 * ha)
        for got, fd in ((hes[:, 0, 0], d_ff), (hes[:, 1, 1], d_aa),
                        (hes[:, 0, 1], d_fa)):
            s = np.max(np.abs(fd))
            if s == 0.0:
                continue
            m = np.abs(fd) > 1e-5 * s
            if m.any():
                worst_h = max(worst_h, np.max(np.abs(got - fd)[m]
                                              / np.abs(fd)[m]))
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst_j <= 1e-4 and worst_h <= 1e-3 and elapsed < 10.0
    assert report("2 (derivatives)", ok,
                  f"jacobian {worst_j:.3g} (tol 1e-4), hessian {worst_h:.3g} "
                  f"(tol 1e-3), {elapsed:.1f}s")


def test_criterion_3_crb_attainment():
    """1,000 Monte-Carlo Gaussian fits at a fixed interior theta (SNR 20,
    21-PLD protocol, M = 8): sample variances within [0.7, 1.3] x the
    theoretical CRB diagonal, in under 2 min."""
    t0 = time.perf_counter()
    theta = KineticParams(60.0, 0.83)
    sigma = float(np.max(signal_curve(theta, make_protocol(1.0)))) / 20.0
    proto = make_protocol(sigma)
    n_trials, m = 1000, 8
    clean = signal_curve(theta, proto)
    spec = NoiseSpec(sigma=sigma, kind=GAUSSIAN, seed=303)
    data = np.empty((n_trials, 21, m))
    for i in range(n_trials):
        for r in range(m):
            data[i, :, r] = add_noise(clean, spec, (i, r, 0))
    maps = fit_map(data, np.ones(n_trials, dtype=bool), proto,
                   BoundsBox.brain())
    ok_fit = maps.fit_valid
    crb = crb_theoretical(theta, proto, m)
    ratio_f = np.var(maps.f[ok_fit], ddof=1) / crb[0, 0]
    ratio_att = np.var(maps.att[ok_fit], ddof=1) / crb[1, 1]
    elapsed = time.perf_counter() - t0
    ok = (0.7 <= ratio_f <= 1.3 and 0.7 <= ratio_att <= 1.3
          and ok_fit.sum() >= 950 and elapsed < 120.0)
    assert report("3 (CRB attainment)", ok,
                  f"var/CRB f {ratio_f:.3f}, att {ratio_att:.3f} "
                  f"(window [0.7, 1.3]), {int(ok_fit.sum())}/1000 fits, "
                  f"{elapsed:.1f}s")


@pytest.fixture(scope="session")
def criterion4_rows():
    t0 = time.perf_counter()
    ds, proto = gaussian_phantom(n_voxels=2000, m_total=50, seed=404)
    rows = convergence_study(ds, proto, ms=[2, 50], k=10, seed=404,
                             reference=REF_TRUTH, box=BoundsBox.brain())
    return rows, time.perf_counter() - t0


def test_criterion_4a_bias_variance_decay(criterion4_rows):
    """Well-specified Gaussian phantom (2,000 voxels, M_total = 50, K = 10):
    median |bias| and median variance at m = 50 each at most 1/3 of their
    m = 2 values, for both parameters, in under 15 min."""
    (r2, r50), elapsed = criterion4_rows
    checks = {
        "bias_f": (r50.bias_f, r2.bias_f),
        "bias_att": (r50.bias_att, r2.bias_att),
        "var_f": (r50.var_f, r2.var_f),
        "var_att": (r50.var_att, r2.var_att),
    }
    ok = all(big > 0 and small <= big / 3.0
             for small, big in checks.values()) and elapsed < 900.0
    detail = ", ".join(f"{k}: {s:.3g} vs {b:.3g}"
                       for k, (s, b) in checks.items())
    assert report("4a (bias/variance decay)", ok,
                  f"m=50 vs m=2 {detail}, {elapsed:.0f}s")


def test_criterion_4b_eigenvalue_window(criterion4_rows):
    """Mean lambda_max and lambda_min at m = 50 within [0.85, 1.15].

    Expected to FAIL: the per-repetition estimators put the voxel-mean
    eigenvalues near 1.19/0.72 at m = 50 under the mandated K = 10
    bootstrap (see README)."""
    (_, r50), _ = criterion4_rows
    in_window = (0.85 <= r50.lambda_max_mean <= 1.15
                 and 0.85 <= r50.lambda_min_mean <= 1.15)
    report("4b (eigenvalue window)", in_window,
           f"mean lambda_max {r50.lambda_max_mean:.3f}, "
           f"lambda_min {r50.lambda_min_mean:.3f} (window [0.85, 1.15]); "
           f"known estimator-spread effect, see README")
    assert in_window


def test_criterion_5_sandwich_identity():
    """Injected B = -A gives kappa = 1 to 1e-10; the congruence metric is
    invariant to joint rescaling of both bounds to 1e-10 relative."""
    g = np.random.default_rng(505)
    worst_kappa = 0.0
    worst_scale = 0.0
    for _ in range(100):
        q = g.normal(size=(2, 2))
        fisher = q @ q.T + 0.1 * np.eye(2)
        a_hat = -fisher
        c_mcrb, c_crb = mcrb_sandwich(a_hat, fisher.copy(),
                                      int(g.integers(1, 60)))
        _, lmax, lmin, kappa = congruence_metric(c_crb, c_mcrb)
        worst_kappa = max(worst_kappa, abs(kappa - 1.0))

        b = g.normal(size=(2, 2))
        c_m2 = b @ b.T + 0.05 * np.eye(2)
        _, l1, l2, k1 = congruence_metric(fisher, c_m2)
        for scale in (1e-8, 17.0, 1e9):
            _, s1, s2, ks = congruence_metric(scale * fisher, scale * c_m2)
            worst_scale = max(worst_scale,
                              abs(s1 - l1) / l1, abs(s2 - l2) / l2,
                              abs(ks - k1) / k1)
    ok = worst_kappa <= 1e-10 and worst_scale <= 1e-10
    assert report("5 (sandwich identity)", ok,
                  f"|kappa-1| {worst_kappa:.3g}, rescale drift "
                  f"{worst_scale:.3g} (tol 1e-10)")


def _matched_pair_phantoms(seed, n_voxels, m_total, k_out):
    """Well-specified and outflow phantoms sharing truths, sigma and noise
    streams (Rician, peak-signal SNR 20, kidney ranges)."""
    base = dict(n_voxels=n_voxels, f_range=(0.0, 900.0),
                att_range=(0.0, 2.0), m_total=m_total, seed=seed)
    proto0 = make_protocol(sigma=1.0, t1=1.4)
    spec0 = PhantomSpec(generator=GEN_BUXTON, **base)
    f, att = draw_truths(spec0)
    curves, _ = clean_curves(spec0, proto0, f, att)
    sigma = sigma_for_snr(curves, 20.0)
    proto = make_protocol(sigma=sigma, t1=1.4)
    noise = NoiseSpec(sigma=sigma, kind=RICIAN, seed=seed)
    ds_ok = generate_phantom(
        PhantomSpec(generator=GEN_BUXTON, noise=noise, **base), proto)
    ds_bad = generate_phantom(
        PhantomSpec(generator=GEN_OUTFLOW, noise=noise,
                    generator_params={"k_out": k_out}, **base), proto)
    return ds_ok, ds_bad, proto


def test_criterion_6_misspecification_detection():
    """Matched phantom pairs (same truths and noise streams; buxton vs
    outflow with k_out = 0.3 1/s, SNR 20, 500 voxels, M = 50, Rician per
    the simulation protocol): over 20 seeds, the misspecified arm's median
    kappa plateau (m in {30, 40, 50}, K = 10 bootstrap) exceeds the
    well-specified arm's in at least 80% of seeds, and its bootstrap
    variance exceeds the theoretical CRB by a strictly larger median
    ratio. Under 20 min."""
    t0 = time.perf_counter()
    box = BoundsBox.kidney()
    ms = [30, 40, 50]
    kappa_wins = 0
    ratios = {"ok": [], "bad": []}
    per_seed = []
    for seed in range(20):
        ds_ok, ds_bad, proto = _matched_pair_phantoms(seed, 500, 50, 0.3)
        plateau = {}
        for label, ds in (("ok", ds_ok), ("bad", ds_bad)):
            rows = convergence_study(ds, proto, ms, k=10, seed=seed,
                                     reference=REF_TRUTH, box=box)
            plateau[label] = float(np.median([r.kappa_mean for r in rows]))
            ratios[label].append(
                bootstrap_var_crb_ratio(ds, proto, m=50, k=10, seed=seed,
                                        box=box)["f"])
        kappa_wins += plateau["bad"] > plateau["ok"]
        per_seed.append(plateau["bad"] - plateau["ok"])
    med_ok = float(np.median(ratios["ok"]))
    med_bad = float(np.median(ratios["bad"]))
    elapsed = time.perf_counter() - t0
    ok = kappa_wins >= 16 and med_bad > med_ok and elapsed < 1200.0
    assert report("6 (misspecification detection)", ok,
                  f"kappa plateau wins {kappa_wins}/20 (need >= 16), "
                  f"median var/CRB ratio {med_bad:.3f} vs {med_ok:.3f} "
                  f"(strictly larger), median kappa margin "
                  f"{np.median(per_seed):+.4f}, {elapsed:.0f}s")


def _node_truth_phantom(proto, n_voxels, m_total, noise, seed):
    box = BoundsBox.brain()
    f_nodes = np.linspace(box.f_min, box.f_max, 32)
    att_nodes = np.linspace(box.att_min, box.att_max, 32)
    times = np.asarray(proto.plds)
    good_att = np.array([a for a in att_nodes[2:-2]
                         if np.min(np.abs(times - a)) > 1e-3
                         and np.min(np.abs(times - a - proto.tau)) > 1e-3])
    g = np.random.default_rng(seed)
    f = g.choice(f_nodes[6:28], size=n_voxels)
    att = g.choice(good_att, size=n_voxels)
    curves = batch_curves(f, att, proto)
    spec = PhantomSpec(n_voxels=n_voxels, f_range=(0.0, 150.0),
                       att_range=(0.0, 2.0), m_total=m_total, seed=seed)
    ds = generate_phantom(spec, proto)
    if noise is None:
        ds.data = np.repeat(curves[:, :, None], m_total, axis=2)
    else:
        data = np.empty((n_voxels, times.size, m_total), dtype=np.float32)
        for i in range(n_voxels):
            for r in range(m_total):
                data[i, :, r] = add_noise(curves[i], noise, (i, r, 0))
        ds.data = data
    ds.truth_f, ds.truth_att = f, att
    return ds


def test_criterion_7_subset_consistency():
    """Noiseless well-specified phantom: subset relative error exactly 0.
    At SNR 20 the mean relative error decreases as M grows through
    {2, 4, 8, 16}, allowing one inversion."""
    proto = make_protocol(sigma=1e-5)
    ds = _node_truth_phantom(proto, n_voxels=60, m_total=4, noise=None,
                             seed=707)
    rep = subset_consistency(ds, proto, k=2, seed=707,
                             box=BoundsBox.brain(), ms=[])
    exact_zero = (rep.valid.sum() >= 55
                  and np.all(rep.relative_error_f[rep.valid] == 0.0)
                  and np.all(rep.relative_error_att[rep.valid] == 0.0))

    theta_ref = KineticParams(60.0, 0.83)
    sigma = float(np.max(signal_curve(theta_ref, proto))) / 20.0
    noisy_proto = make_protocol(sigma)
    noise = NoiseSpec(sigma=sigma, kind=GAUSSIAN, seed=708)
    ds_noisy = _node_truth_phantom(noisy_proto, n_voxels=300, m_total=16,
                                   noise=noise, seed=708)
    errs = []
    for m in (2, 4, 8, 16):
        r = subset_consistency(ds_noisy.take_reps(m), noisy_proto, k=2,
                               seed=709, box=BoundsBox.brain(), ms=[])
        errs.append(0.5 * (r.mean_relative_error_f
                           + r.mean_relative_error_att))
    inversions = sum(1 for a, b in zip(errs, errs[1:]) if b > a)
    ok = exact_zero and inversions <= 1
    assert report("7 (subset consistency)", ok,
                  f"noiseless rel err exactly zero: {exact_zero}; "
                  f"mean rel err over M=2,4,8,16: "
                  f"{', '.join(f'{e:.4f}' for e in errs)} "
                  f"({inversions} inversions allowed 1)")


def test_criterion_8_t1_experiment():
    """Phantoms generated with two true T1s (1.2/1.5 s, top-10% rule),
    fitted with a global 1.2 s versus the voxelwise assignment: mean
    lambda_max(global) > mean lambda_max(voxelwise) in >= 80% of 20
    seeds."""
    t0 = time.perf_counter()
    wins = 0
    margins = []
    for seed in range(20):
        base = dict(n_voxels=1000, f_range=(0.0, 150.0),
                    att_range=(0.0, 2.0), m_total=40, seed=seed)
        proto0 = make_protocol(sigma=1.0, t1=1.2)
        spec0 = PhantomSpec(generator=GEN_WRONG_T1,
                            generator_params={"t1_global": 1.2,
                                              "t1_alt": 1.5,
                                              "top_fraction": 0.10}, **base)
        f, att = draw_truths(spec0)
        curves, _ = clean_curves(spec0, proto0, f, att)
        sigma = sigma_for_snr(curves, 20.0)
        proto = make_protocol(sigma=sigma, t1=1.2)
        noise = NoiseSpec(sigma=sigma, kind=RICIAN, seed=seed)
        spec = PhantomSpec(generator=GEN_WRONG_T1, noise=noise,
                           generator_params={"t1_global": 1.2,
                                             "t1_alt": 1.5,
                                             "top_fraction": 0.10}, **base)
        ds = generate_phantom(spec, proto)
        res = t1_experiment(ds, proto, t1_global=1.2, t1_alt=1.5,
                            top_fraction=0.10, box=BoundsBox.brain())
        margin = res.mean_lambda_max_global - res.mean_lambda_max_voxelwise
        margins.append(margin)
        wins += margin > 0
    elapsed = time.perf_counter() - t0
    ok = wins >= 16
    assert report("8 (T1 experiment)", ok,
                  f"wins {wins}/20 (need >= 16), median margin "
                  f"{np.median(margins):+.5f}, {elapsed:.0f}s")


def test_criterion_9_determinism_and_round_trip(tmp_path):
    """Identical CSV hashes across thread counts for the same seed;
    bit-exact dataset round trip; malformed containers rejected with the
    offending field named."""
    # CSV hash stability across thread counts
    phantom = tmp_path / "phantom"
    assert cli_main(["simulate", "--voxels", "60", "--m", "10",
                     "--seed", "11", "--out", str(phantom)]) == 0
    digests = []
    for threads in ("1", "3"):
        out = tmp_path / f"conv{threads}"
        assert cli_main(["converge", "--data", str(phantom), "--k", "4",
                         "--m-min", "2", "--m-max", "10", "--m-step", "4",
                         "--seed", "11", "--threads", threads,
                         "--out", str(out)]) == 0
        digests.append(hashlib.sha256(
            (out / "converge.csv").read_bytes()).hexdigest())
    hash_stable = digests[0] == digests[1]

    # bit-exact container round trip
    ds = read_dataset(phantom)
    copy_dir = tmp_path / "copy"
    write_dataset(ds, copy_dir)
    round_trip = ((phantom / "data.raw").read_bytes()
                  == (copy_dir / "data.raw").read_bytes()
                  and (phantom / "mask.raw").read_bytes()
                  == (copy_dir / "mask.raw").read_bytes())
    back = read_dataset(copy_dir)
    round_trip = round_trip and np.array_equal(back.data, ds.data)

    # malformed containers name the offending field
    blob = (copy_dir / "data.raw").read_bytes()
    (copy_dir / "data.raw").write_bytes(blob[:-8])
    try:
        read_dataset(copy_dir)
        named_size = False
    except SizeMismatch as exc:
        named_size = "data.raw" in str(exc)
    (copy_dir / "data.raw").write_bytes(blob)
    import json
    manifest = json.loads((copy_dir / "manifest.json").read_text())
    manifest["plds"] = manifest["plds"][:-1]
    (copy_dir / "manifest.json").write_text(json.dumps(manifest))
    try:
        read_dataset(copy_dir)
        named_field = False
    except FormatError as exc:
        named_field = "plds" in str(exc)

    ok = hash_stable and round_trip and named_size and named_field
    assert report("9 (determinism & round trip)", ok,
                  f"csv hashes equal: {hash_stable}, round trip bitwise: "
                  f"{round_trip}, truncation names data.raw: {named_size}, "
                  f"manifest error names plds: {named_field}")
