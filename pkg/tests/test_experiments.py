import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aslmcrb.experiments import (
    REF_FULL_FIT,
    REF_TRUTH,
    bootstrap_indices,
    bootstrap_var_crb_ratio,
    convergence_study,
    convergence_table,
    subset_consistency,
    subset_partition,
    t1_experiment,
)
from aslmcrb.fitting import BoundsBox
from aslmcrb.kinetic import Protocol, default_plds
from aslmcrb.noise import GAUSSIAN, NoiseSpec, RICIAN
from aslmcrb.phantom import GEN_WRONG_T1, PhantomSpec, generate_phantom


def node_truth_phantom(protocol, n_voxels=24, m_total=6, noise=None, seed=9):
    """Phantom whose truths sit exactly on 32x32 fit-grid nodes, away from
    kinks, so noiseless fits terminate bitwise at the truth."""
    box = BoundsBox.brain()
    f_nodes = np.linspace(box.f_min, box.f_max, 32)
    att_nodes = np.linspace(box.att_min, box.att_max, 32)
    times = np.asarray(protocol.plds)
    good_att = [a for a in att_nodes[3:-3]
                if np.min(np.abs(times - a)) > 1e-3
                and np.min(np.abs(times - a - protocol.tau)) > 1e-3]
    g = np.random.default_rng(seed)
    f = g.choice(f_nodes[4:28], size=n_voxels)
    att = g.choice(np.asarray(good_att), size=n_voxels)
    spec = PhantomSpec(n_voxels=n_voxels, f_range=(0.0, 150.0),
                       att_range=(0.0, 2.0), m_total=m_total, noise=noise,
                       seed=seed)
    ds = generate_phantom(spec, protocol)
    # overwrite the uniform truths with grid-node truths
    from aslmcrb.kinetic import batch_curves
    curves = batch_curves(f, att, protocol)
    if noise is None:
        ds.data = np.repeat(curves[:, :, None], m_total, axis=2)
    else:
        from aslmcrb.noise import add_noise
        data = np.empty((n_voxels, len(times), m_total), dtype=np.float32)
        for i in range(n_voxels):
            for r in range(m_total):
                data[i, :, r] = add_noise(curves[i], noise, (i, r, 0))
        ds.data = data
    ds.truth_f = f
    ds.truth_att = att
    return ds


class TestBootstrapIndices:
    def test_shape_and_range(self):
        idx = bootstrap_indices(8, 10, seed=4)
        assert idx.shape == (10, 8)
        assert idx.min() >= 0 and idx.max() < 8

    def test_rejects_m_below_two(self):
        with pytest.raises(ValueError):
            bootstrap_indices(1, 10, seed=0)

    def test_deterministic_per_row(self):
        a = bootstrap_indices(12, 5, seed=7)
        b = bootstrap_indices(12, 5, seed=7)
        assert np.array_equal(a, b)
        c = bootstrap_indices(12, 5, seed=8)
        assert not np.array_equal(a, c)

    def test_uniform_frequencies(self):
        m = 5
        idx = bootstrap_indices(m, 20000, seed=1)
        freq = np.bincount(idx.ravel(), minlength=m) / idx.size
        assert np.all(np.abs(freq - 1.0 / m) < 0.01 / m * m)  # within 1%


class TestSubsetPartition:
    def test_paper_grid_sizes(self):
        s1, s2 = subset_partition(default_plds())
        assert len(s1) == 11 and len(s2) == 10
        assert set(s1).isdisjoint(s2)
        assert sorted(set(s1) | set(s2)) == sorted(default_plds())
        assert 0.0 in s1

    def test_uniform_four_grid(self):
        s1, s2 = subset_partition([1.0, 2.0, 3.0, 4.0])
        assert list(s1) == [1.0, 2.0]
        assert list(s2) == [3.0, 4.0]

    def test_deterministic(self):
        a = subset_partition(default_plds())
        b = subset_partition(default_plds())
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_set1_early_weighted(self):
        s1, s2 = subset_partition(default_plds())
        assert np.median(s1) < np.median(s2)

    @given(st.lists(st.floats(min_value=0.01, max_value=10.0),
                    min_size=4, max_size=40, unique=True))
    @settings(max_examples=200, deadline=None)
    def test_partition_property(self, values):
        plds = np.sort(np.asarray(values))
        s1, s2 = subset_partition(plds)
        assert len(s1) == int(np.ceil(len(plds) / 2))
        assert len(s2) == len(plds) // 2
        assert set(s1).isdisjoint(set(s2))
        assert np.array_equal(np.sort(np.concatenate([s1, s2])), plds)


class TestConvergenceStudy:
    def test_noiseless_zero_bias_and_variance(self, brain_protocol):
        ds = node_truth_phantom(brain_protocol, n_voxels=16, m_total=6)
        rows = convergence_study(ds, brain_protocol, ms=[2, 4, 6], k=3,
                                 seed=1, reference=REF_TRUTH,
                                 box=BoundsBox.brain())
        for r in rows:
            assert r.bias_f == 0.0
            assert r.bias_att == 0.0
            assert r.var_f == 0.0
            assert r.var_att == 0.0
            # eigenvalue aggregates degenerate on noiseless data -> NaN,
            # but rows are still produced with the exclusions recorded
            assert np.isnan(r.kappa_mean)
            assert r.excluded_fraction == 1.0

    def test_noisy_bias_and_variance_shrink(self, brain_protocol):
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=2)
        ds = node_truth_phantom(brain_protocol, n_voxels=80, m_total=24,
                                noise=noise, seed=3)
        rows = convergence_study(ds, brain_protocol, ms=[2, 24], k=6, seed=5,
                                 reference=REF_TRUTH, box=BoundsBox.brain())
        assert rows[1].var_f < rows[0].var_f
        assert rows[1].var_att < rows[0].var_att
        assert rows[1].bias_f < rows[0].bias_f
        assert 0.0 <= rows[1].excluded_fraction < 0.5
        assert rows[1].kappa_mean >= 1.0
        assert rows[1].lambda_max_mean >= rows[1].lambda_min_mean

    def test_full_fit_reference(self, brain_protocol):
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=4)
        ds = node_truth_phantom(brain_protocol, n_voxels=20, m_total=8,
                                noise=noise, seed=6)
        rows = convergence_study(ds, brain_protocol, ms=[8], k=4, seed=5,
                                 reference=REF_FULL_FIT,
                                 box=BoundsBox.brain())
        assert len(rows) == 1
        assert np.isfinite(rows[0].bias_f)

    def test_rejects_oversized_m(self, brain_protocol):
        ds = node_truth_phantom(brain_protocol, n_voxels=4, m_total=4)
        with pytest.raises(ValueError):
            convergence_study(ds, brain_protocol, ms=[8], k=2, seed=0,
                              reference=REF_TRUTH, box=BoundsBox.brain())

    def test_table_emission(self, brain_protocol):
        ds = node_truth_phantom(brain_protocol, n_voxels=8, m_total=4)
        rows = convergence_study(ds, brain_protocol, ms=[2, 3, 4], k=2,
                                 seed=0, reference=REF_TRUTH,
                                 box=BoundsBox.brain())
        table = convergence_table(rows)
        assert len(table.rows) == 3
        assert table.column("m (count)") == [2, 3, 4]


class TestSubsetConsistency:
    def test_noiseless_zero_relative_error(self, brain_protocol):
        ds = node_truth_phantom(brain_protocol, n_voxels=20, m_total=4)
        rep = subset_consistency(ds, brain_protocol, k=2, seed=3,
                                 box=BoundsBox.brain(), ms=[])
        ok = rep.valid
        assert ok.sum() >= 18
        assert np.all(rep.relative_error_f[ok] == 0.0)
        assert np.all(rep.relative_error_att[ok] == 0.0)
        assert rep.mean_relative_error_f == 0.0

    def test_variance_rows_and_crb(self, brain_protocol):
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=8)
        ds = node_truth_phantom(brain_protocol, n_voxels=40, m_total=12,
                                noise=noise, seed=2)
        rep = subset_consistency(ds, brain_protocol, k=6, seed=3,
                                 box=BoundsBox.brain(), ms=[4, 12])
        assert len(rep.variance_rows) == 4  # 2 subsets x 2 m values
        for row in rep.variance_rows:
            assert row.crb_f > 0
            assert row.var_f > 0
        # both variance and CRB shrink with m (medians run over the voxels
        # valid at each m, so the 1/m law is only approximate here)
        by_key = {(r.subset, r.m): r for r in rep.variance_rows}
        assert by_key[(1, 12)].crb_f < by_key[(1, 4)].crb_f
        assert by_key[(1, 12)].var_f < by_key[(1, 4)].var_f


class TestT1Experiment:
    def test_equal_t1_gives_zero_difference(self, brain_protocol):
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=5)
        ds = node_truth_phantom(brain_protocol, n_voxels=24, m_total=10,
                                noise=noise, seed=4)
        res = t1_experiment(ds, brain_protocol, t1_global=1.2, t1_alt=1.2,
                            box=BoundsBox.brain())
        ok = res.joint_valid
        assert ok.sum() > 0
        assert np.all(res.diff_lambda_max[ok] == 0.0)
        assert np.all(res.diff_kappa[ok] == 0.0)

    def test_top_fraction_count(self, brain_protocol):
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=5)
        ds = node_truth_phantom(brain_protocol, n_voxels=30, m_total=4,
                                noise=noise, seed=4)
        res = t1_experiment(ds, brain_protocol, t1_global=1.2, t1_alt=1.5,
                            top_fraction=0.10, box=BoundsBox.brain())
        assert res.top_voxels.sum() == 3  # ceil(0.10 * 30)
        assert set(np.unique(res.t1_map)) == {1.2, 1.5}

    def test_wrong_t1_phantom_separates(self, brain_protocol):
        # generator uses two T1s; fitting with the global value inflates
        # lambda_max relative to the (approximately) correct voxelwise map
        wins = 0
        for seed in range(4):
            spec = PhantomSpec(
                n_voxels=300, f_range=(1.0, 150.0), att_range=(0.0, 2.0),
                generator=GEN_WRONG_T1,
                generator_params={"t1_global": 1.2, "t1_alt": 1.5,
                                  "top_fraction": 0.10},
                m_total=30, seed=seed,
                noise=NoiseSpec(sigma=4.5e-4, kind=RICIAN, seed=seed))
            ds = generate_phantom(spec, brain_protocol)
            sigma = 4.5e-4
            proto = Protocol(plds=brain_protocol.plds, tau=1.5, sigma=sigma,
                             t1_tissue=1.2)
            res = t1_experiment(ds, proto, t1_global=1.2, t1_alt=1.5,
                                box=BoundsBox.brain())
            wins += (res.mean_lambda_max_global
                     > res.mean_lambda_max_voxelwise)
        assert wins >= 3


class TestVarCrbRatio:
    def test_well_specified_within_factor_two_of_crb(self, brain_protocol):
        # SNR-20 Gaussian phantom: bootstrap variance of f stays within a
        # factor 2 of the theoretical bound once m >= 8
        noise = NoiseSpec(sigma=4.5e-4, kind=GAUSSIAN, seed=6)
        ds = node_truth_phantom(brain_protocol, n_voxels=60, m_total=16,
                                noise=noise, seed=5)
        for m in (8, 16):
            out = bootstrap_var_crb_ratio(ds, brain_protocol, m=m, k=10,
                                          seed=2, box=BoundsBox.brain())
            assert 0.5 < out["f"] < 2.0
            assert out["n_voxels"] > 40
