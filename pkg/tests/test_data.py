import numpy as np
import pytest

from ascnet import data
from ascnet.data import (
    SynthConfig,
    dice,
    export_rate_field,
    generate_synth,
    load_image_dir,
    load_rate_field_csv,
    precision,
    preprocess,
    rate_stats,
    read_pgm,
    recall,
    write_pgm,
)


def small_cfg(**kw):
    defaults = dict(num_train=4, num_test=2, height=48, width=48)
    defaults.update(kw)
    return SynthConfig(**defaults)


class TestPreprocess:
    def test_ramp_normalized(self):
        out = preprocess(np.arange(16.0).reshape(4, 4))
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1.0) < 1e-5

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = preprocess(rng.standard_normal((8, 8)))
        again = preprocess(x)
        assert np.allclose(again, x, atol=1e-6)

    def test_statistics_recomputed(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0, 1, (16, 16))
        out = preprocess(raw)
        assert np.allclose(out * raw.std() + raw.mean(), raw, atol=1e-5)

    def test_constant_image_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            preprocess(np.full((4, 4), 3.0))


class TestGenerateSynth:
    def test_no_objects_all_background(self):
        cfg = small_cfg(small_per_image=(0, 0), large_per_image=(0, 0))
        train, _ = generate_synth(cfg)
        assert all(not s.labels.any() for s in train)

    def test_deterministic(self):
        a_train, a_test = generate_synth(small_cfg(seed=9))
        b_train, b_test = generate_synth(small_cfg(seed=9))
        for a, b in zip(a_train + a_test, b_train + b_test):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.labels, b.labels)
            assert a.meta == b.meta

    def test_foreground_fraction_default_cfg(self):
        train, _ = generate_synth(SynthConfig(num_train=200, num_test=1))
        for s in train:
            frac = s.labels.mean()
            assert 0.02 <= frac <= 0.40

    def test_images_preprocessed(self):
        train, _ = generate_synth(small_cfg())
        for s in train:
            assert abs(s.image.mean()) < 1e-5
            assert abs(s.image.std() - 1.0) < 1e-4

    def test_both_populations_present(self):
        train, _ = generate_synth(small_cfg())
        for s in train:
            radii = [r for _, _, r in s.meta]
            assert any(r <= 4.0 for r in radii)
            assert any(r >= 10.0 for r in radii)

    def test_overlapping_ranges_rejected(self):
        with pytest.raises(ValueError, match="disjoint"):
            SynthConfig(small_radius=(2, 11), large_radius=(10, 16))

    def test_infeasible_placement_errors(self):
        with pytest.raises(RuntimeError, match="place"):
            generate_synth(small_cfg(large_per_image=(8, 8), max_place_tries=5))


class TestMetrics:
    def test_perfect_prediction(self):
        m = np.zeros((5, 5), bool)
        m[1:3, 1:3] = True
        assert dice(m, m) == precision(m, m) == recall(m, m) == 1.0

    def test_disjoint_nonempty(self):
        p = np.zeros((4, 4), bool)
        t = np.zeros((4, 4), bool)
        p[0, 0] = True
        t[3, 3] = True
        assert dice(p, t) == precision(p, t) == recall(p, t) == 0.0

    def test_half_overlap(self):
        p = np.zeros(6, bool)
        t = np.zeros(6, bool)
        p[:2] = True
        t[1:3] = True
        assert dice(p, t) == 0.5
        assert precision(p, t) == 0.5
        assert recall(p, t) == 0.5

    def test_empty_conventions(self):
        e = np.zeros(4, bool)
        f = np.array([True, False, False, False])
        assert dice(e, e) == precision(e, e) == recall(e, e) == 1.0
        assert dice(f, e) == 0.0 and dice(e, f) == 0.0
        assert precision(e, f) == 0.0 and recall(f, e) == 0.0

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.random(20) > 0.5
            t = rng.random(20) > 0.5
            d = dice(p, t)
            assert 0.0 <= d <= 1.0
            assert d == dice(t, p)
            assert precision(p, t) == recall(t, p)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dice(np.zeros(3, bool), np.zeros(4, bool))


class TestPgm:
    @pytest.mark.parametrize("maxval,dtype", [(255, np.uint8), (65535, np.uint16)])
    def test_round_trip_exact(self, tmp_path, maxval, dtype):
        rng = np.random.default_rng(0)
        values = rng.integers(0, maxval + 1, size=(9, 7)).astype(dtype)
        path = tmp_path / "x.pgm"
        write_pgm(path, values, maxval=maxval)
        assert np.array_equal(read_pgm(path), values)

    def test_16bit_big_endian_payload(self, tmp_path):
        path = tmp_path / "x.pgm"
        write_pgm(path, np.array([[0x0102]], dtype=np.uint16), maxval=65535)
        blob = path.read_bytes()
        assert blob.endswith(b"\x01\x02")

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x07\x09")
        assert np.array_equal(read_pgm(path), [[7, 9]])

    def test_non_p5_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError, match="P5"):
            read_pgm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(ValueError, match="truncated"):
            read_pgm(path)


class TestRateFieldExport:
    def test_constant_field(self, tmp_path):
        rates = np.full((1, 1, 4, 4), 2.5, dtype=np.float32)
        prefix = tmp_path / "rf"
        export_rate_field(rates, prefix)
        pgm = read_pgm(str(prefix) + ".pgm")
        assert (pgm == pgm.flat[0]).all()
        csv = load_rate_field_csv(str(prefix) + ".csv")
        assert np.all(csv == 2.5)

    def test_csv_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        rates = rng.uniform(0, 3, (1, 1, 6, 5)).astype(np.float32)
        prefix = tmp_path / "rf"
        export_rate_field(rates, prefix)
        back = load_rate_field_csv(str(prefix) + ".csv").astype(np.float32)
        assert np.array_equal(back, rates)

    def test_scale_sidecar(self, tmp_path):
        rates = np.linspace(0.5, 2.0, 16, dtype=np.float64).reshape(1, 1, 4, 4)
        prefix = tmp_path / "rf"
        export_rate_field(rates, prefix)
        text = (tmp_path / "rf.scale.txt").read_text()
        assert "min=0.5" in text and "max=2.0" in text

    def test_rate_stats_constructed(self):
        h = w = 32
        labels = np.zeros((1, h, w), dtype=np.int64)
        rates = np.zeros((1, 1, h, w))
        meta = [(8.0, 8.0, 3.0), (22.0, 22.0, 9.0)]
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        for cy, cx, r in meta:
            mask = np.hypot(yy - cy, xx - cx) <= r
            labels[0][mask] = 1
            rates[0, 0][mask] = 2 * r
        stats = rate_stats(rates, labels, meta)
        assert stats["large"] > stats["small"]
        assert stats["background"] == 0.0


class TestCorpusIO:
    def test_write_then_load_round_trip(self, tmp_path):
        train, _ = generate_synth(small_cfg(seed=3))
        data.write_samples(train, tmp_path / "train")
        loaded = load_image_dir(tmp_path / "train")
        assert len(loaded) == len(train)
        for a, b in zip(train, loaded):
            assert np.array_equal(a.labels, b.labels)
            assert np.abs(a.raw - b.raw).max() <= 1.0 / 65535
            assert a.meta == pytest.approx(b.meta)

    def test_empty_directory_errors(self, tmp_path):
        with pytest.raises(ValueError, match="no img_"):
            load_image_dir(tmp_path)

    def test_unpaired_file_errors(self, tmp_path):
        write_pgm(tmp_path / "img_0000.pgm", np.zeros((4, 4), np.uint8), 255)
        with pytest.raises(ValueError, match="lbl_0000"):
            load_image_dir(tmp_path)

    def test_mis_sized_pair_errors(self, tmp_path):
        write_pgm(tmp_path / "img_0000.pgm",
                  np.random.default_rng(0).integers(0, 256, (4, 4)).astype(np.uint8), 255)
        write_pgm(tmp_path / "lbl_0000.pgm", np.zeros((5, 5), np.uint8), 255)
        with pytest.raises(ValueError, match="dims"):
            load_image_dir(tmp_path)

    def test_8bit_and_16bit_agree_after_preprocess(self, tmp_path):
        rng = np.random.default_rng(4)
        raw = rng.uniform(0, 1, (16, 16))
        d8 = tmp_path / "d8"
        d16 = tmp_path / "d16"
        for d in (d8, d16):
            d.mkdir()
            write_pgm(d / "lbl_0000.pgm", np.zeros((16, 16), np.uint8), 255)
        write_pgm(d8 / "img_0000.pgm", np.round(raw * 255).astype(np.uint8), 255)
        write_pgm(d16 / "img_0000.pgm", np.round(raw * 65535).astype(np.uint16), 65535)
        s8 = load_image_dir(d8)[0]
        s16 = load_image_dir(d16)[0]
        assert np.abs(s8.image - s16.image).max() < 1e-2
