import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from gmp.data import (SynthConfig, dataset_hash, export_csv, generate,
                      import_csv, make_preset, split_leave_one_domain_out,
                      _embeddings)


def small_cfg(**kw):
    defaults = dict(num_classes=4, num_domains=3,
                    samples_per_class_per_domain=12, dim_v=10, dim_a=10,
                    seed=5)
    defaults.update(kw)
    return SynthConfig(**defaults)


def probe_accuracy(x_train, y_train, x_test, y_test):
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_train, y_train)
    return clf.score(x_test, y_test)


class TestConfig:
    def test_rejects_two_domains(self):
        with pytest.raises(ValueError):
            small_cfg(num_domains=2)

    def test_rejects_negative_amplitude(self):
        with pytest.raises(ValueError):
            small_cfg(noise_std={"v": -0.1, "a": 0.1})

    def test_rejects_dim_smaller_than_subspace(self):
        with pytest.raises(ValueError):
            small_cfg(dim_v=6)  # needs >= 4 + 3

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            make_preset("nope")


class TestGenerate:
    def test_same_seed_bitwise_identical(self):
        d1, d2 = generate(small_cfg()), generate(small_cfg())
        assert np.array_equal(d1.x_v, d2.x_v)
        assert np.array_equal(d1.x_a, d2.x_a)
        assert np.array_equal(d1.y, d2.y)
        assert np.array_equal(d1.d, d2.d)

    def test_sizes_and_label_ranges(self):
        cfg = small_cfg()
        ds = generate(cfg)
        assert len(ds) == 4 * 3 * 12
        assert set(np.unique(ds.y)) == set(range(4))
        assert set(np.unique(ds.d)) == set(range(3))

    def test_pure_signal_same_class_identical(self):
        cfg = small_cfg(noise_std={"v": 0.0, "a": 0.0},
                        domain_leak={"v": 0.0, "a": 0.0})
        ds = generate(cfg)
        for cls in range(cfg.num_classes):
            rows = ds.x_v[ds.y == cls]
            assert np.array_equal(rows, np.tile(rows[0], (len(rows), 1)))

    def test_order_independent_generation(self):
        # shrinking the per-group count must not change the samples kept
        big = generate(small_cfg(samples_per_class_per_domain=12))
        small = generate(small_cfg(samples_per_class_per_domain=5))
        for domain in range(3):
            for cls in range(4):
                sel_b = (big.d == domain) & (big.y == cls)
                sel_s = (small.d == domain) & (small.y == cls)
                assert np.array_equal(big.x_v[sel_b][:5], small.x_v[sel_s])
                assert np.array_equal(big.x_a[sel_b][:5], small.x_a[sel_s])

    def test_embedding_columns_mutually_orthogonal(self):
        cfg = small_cfg()
        for m in ("v", "a"):
            p_cols, q_cols = _embeddings(cfg, m)
            basis = np.hstack([p_cols, q_cols])
            gram = basis.T @ basis
            assert np.abs(gram - np.eye(gram.shape[0])).max() < 1e-9

    def test_zero_discrim_strength_probe_is_chance(self):
        cfg = small_cfg(discrim_strength={"v": 1.0, "a": 0.0},
                        samples_per_class_per_domain=80, seed=8)
        ds = generate(cfg)
        train, val, _ = split_leave_one_domain_out(ds, 2, 0.25)
        acc = probe_accuracy(train.x_a, train.y, val.x_a, val.y)
        assert abs(acc - 1.0 / cfg.num_classes) < 0.08
        # while the untouched modality stays informative
        acc_v = probe_accuracy(train.x_v, train.y, val.x_v, val.y)
        assert acc_v > 0.8


class TestSplit:
    def test_source_domains_only(self):
        ds = generate(small_cfg())
        train, val, test = split_leave_one_domain_out(ds, 2, 0.25)
        assert set(np.unique(train.d)) == {0, 1}
        assert set(np.unique(val.d)) == {0, 1}
        assert set(np.unique(test.d)) == {2}

    def test_partition_property(self):
        ds = generate(small_cfg())
        train, val, test = split_leave_one_domain_out(ds, 1, 0.25)
        sizes = len(train) + len(val) + len(test)
        assert sizes == len(ds)
        # disjointness via exact row multiset: every original row appears once
        all_rows = np.vstack([train.x_v, val.x_v, test.x_v])
        order = np.lexsort(all_rows.T)
        orig_order = np.lexsort(ds.x_v.T)
        assert np.array_equal(all_rows[order], ds.x_v[orig_order])

    def test_exact_val_counts(self):
        cfg = small_cfg(samples_per_class_per_domain=100, num_classes=2,
                        dim_v=8, dim_a=8)
        ds = generate(cfg)
        _, val, _ = split_leave_one_domain_out(ds, 2, 0.2)
        for domain in (0, 1):
            for cls in range(2):
                assert np.sum((val.d == domain) & (val.y == cls)) == 20

    def test_unknown_target_domain(self):
        ds = generate(small_cfg())
        with pytest.raises(KeyError):
            split_leave_one_domain_out(ds, 9, 0.2)

    def test_bad_fraction(self):
        ds = generate(small_cfg())
        with pytest.raises(ValueError):
            split_leave_one_domain_out(ds, 2, 0.0)

    def test_split_deterministic(self):
        ds = generate(small_cfg())
        t1, v1, _ = split_leave_one_domain_out(ds, 2, 0.25)
        t2, v2, _ = split_leave_one_domain_out(ds, 2, 0.25)
        assert np.array_equal(t1.x_v, t2.x_v)
        assert np.array_equal(v1.x_v, v2.x_v)


class TestCsvRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        ds = generate(small_cfg())
        path = tmp_path / "dataset.csv"
        export_csv(ds, path)
        back = import_csv(path)
        assert np.array_equal(back.x_v, ds.x_v)
        assert np.array_equal(back.x_a, ds.x_a)
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.d, ds.d)

    def test_header(self, tmp_path):
        ds = generate(small_cfg())
        path = tmp_path / "dataset.csv"
        export_csv(ds, path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("domain,class,v0,")
        assert header.endswith(",a9")

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(ValueError):
            import_csv(path)

    def test_hash_stability(self):
        d1, d2 = generate(small_cfg()), generate(small_cfg())
        assert dataset_hash(d1) == dataset_hash(d2)
        assert dataset_hash(d1) != dataset_hash(generate(small_cfg(seed=6)))


class TestAsymmetryRealization:
    def test_strong_leaky_vs_weak_stable(self):
        # modality v: source-strong but domain-contaminated; modality a:
        # weaker on source but degrades less on the held-out domain
        cfg = make_preset("asym-v", seed=3)
        ds = generate(cfg)
        train, val, test = split_leave_one_domain_out(ds, 2, 0.2)
        val_v = probe_accuracy(train.x_v, train.y, val.x_v, val.y)
        tgt_v = probe_accuracy(train.x_v, train.y, test.x_v, test.y)
        val_a = probe_accuracy(train.x_a, train.y, val.x_a, val.y)
        tgt_a = probe_accuracy(train.x_a, train.y, test.x_a, test.y)
        assert val_v > val_a
        assert (val_v - tgt_v) > (val_a - tgt_a)
