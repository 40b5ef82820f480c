"""Dataset plumbing: PGM I/O, manifests, degradation, batching, generation."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import binom

from mlcak.data import (
    Manifest,
    ResolutionSpec,
    SampleRecord,
    batches,
    box_downscale,
    degrade,
    load_image,
    load_manifest,
    save_manifest,
    shuffled_indices,
    write_pgm,
)
from mlcak.errors import ContractError, ParseError, ShapeError
from mlcak.synth import SyntheticConfig, generate_synthetic


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, (12, 12))
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        back = load_image(path)
        # 8-bit storage: exact to half a grey level
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_all_black(self, tmp_path):
        path = tmp_path / "b.pgm"
        write_pgm(path, np.zeros((4, 4)))
        assert np.array_equal(load_image(path), np.zeros((4, 4)))

    def test_bytes_round_trip_exact(self, tmp_path):
        values = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
        path = tmp_path / "v.pgm"
        write_pgm(path, values)
        assert np.array_equal(load_image(path), values)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(ParseError):
            load_image(tmp_path / "bad.pgm")

    def test_wrong_maxval(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
        with pytest.raises(ParseError):
            load_image(tmp_path / "m.pgm")

    def test_truncated_body(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + b"\0" * 7)
        with pytest.raises(ParseError, match="16"):
            load_image(tmp_path / "t.pgm")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="nope.pgm"):
            load_image(tmp_path / "nope.pgm")

    def test_writer_rejects_non_2d(self, tmp_path):
        with pytest.raises(ShapeError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def build_manifest(num=4, findings=3):
    rng = np.random.default_rng(5)
    records = []
    for i in range(num):
        bits = rng.integers(0, 2, findings)
        records.append(SampleRecord(f"s{i}", f"images/s{i}.pgm",
                                    bits, int(bits.any())))
    return Manifest(version=1, num_findings=findings,
                    finding_names=[f"c{k}" for k in range(findings)],
                    records=records, split="train")


class TestManifestCsv:
    def test_round_trip_identity(self, tmp_path):
        m = build_manifest()
        save_manifest(m, tmp_path / "train.csv")
        back = load_manifest(tmp_path / "train.csv")
        assert back.split == "train"
        assert back.num_findings == m.num_findings
        assert back.finding_names == m.finding_names
        assert np.array_equal(back.label_matrix(), m.label_matrix())
        assert np.array_equal(back.global_labels(), m.global_labels())
        assert [r.image_id for r in back.records] == [r.image_id for r in m.records]
        assert [r.image_path for r in back.records] == [r.image_path for r in m.records]

    def test_split_from_filename(self, tmp_path):
        m = build_manifest()
        save_manifest(m, tmp_path / "test.csv")
        assert load_manifest(tmp_path / "test.csv").split == "test"

    def test_header_schema(self, tmp_path):
        m = build_manifest(findings=2)
        save_manifest(m, tmp_path / "train.csv")
        header = (tmp_path / "train.csv").read_text().splitlines()[0]
        assert header == "image_id,image_path,global_label,f_c0,f_c1"

    def test_short_row_names_line(self, tmp_path):
        text = "image_id,image_path,global_label,f_a,f_b\nx,images/x.pgm,1,1\n"
        (tmp_path / "train.csv").write_text(text)
        with pytest.raises(ParseError, match="line 2"):
            load_manifest(tmp_path / "train.csv")

    def test_bad_bit_names_line(self, tmp_path):
        text = ("image_id,image_path,global_label,f_a\n"
                "x,images/x.pgm,1,1\n"
                "y,images/y.pgm,q,0\n")
        (tmp_path / "train.csv").write_text(text)
        with pytest.raises(ParseError, match="line 3"):
            load_manifest(tmp_path / "train.csv")

    def test_duplicate_path_rejected(self, tmp_path):
        text = ("image_id,image_path,global_label,f_a\n"
                "x,images/x.pgm,1,1\n"
                "y,images/x.pgm,1,1\n")
        (tmp_path / "train.csv").write_text(text)
        with pytest.raises(ParseError, match="duplicate"):
            load_manifest(tmp_path / "train.csv")

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "train.csv").write_text("id,path,label,f_a\nx,y,1,0\n")
        with pytest.raises(ParseError, match="line 1"):
            load_manifest(tmp_path / "train.csv")

    def test_inconsistent_global_warns_for_external(self, tmp_path):
        text = ("image_id,image_path,global_label,f_a\n"
                "x,images/x.pgm,0,1\n")
        (tmp_path / "train.csv").write_text(text)
        with pytest.warns(UserWarning, match="line 2"):
            m = load_manifest(tmp_path / "train.csv")
        assert len(m) == 1

    def test_inconsistent_global_fails_for_generated(self, tmp_path):
        text = ("image_id,image_path,global_label,f_a\n"
                "x,images/x.pgm,0,1\n")
        (tmp_path / "train.csv").write_text(text)
        (tmp_path / "generation.json").write_text("{}")
        with pytest.raises(ParseError, match="line 2"):
            load_manifest(tmp_path / "train.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="train.csv"):
            load_manifest(tmp_path / "train.csv")


class TestResolutionSpec:
    def test_divisibility_guard(self):
        with pytest.raises(ContractError, match="divide"):
            ResolutionSpec(native=64, target=30, model_input=64)

    def test_custom_blesses_indivisible(self):
        spec = ResolutionSpec(native=64, target=30, model_input=64, custom=True)
        assert spec.target == 30

    def test_target_bounded_by_native(self):
        with pytest.raises(ContractError):
            ResolutionSpec(native=64, target=128, model_input=64, custom=True)

    def test_model_input_bounded_by_native(self):
        with pytest.raises(ContractError):
            ResolutionSpec(native=64, target=64, model_input=128)

    def test_positive_fields(self):
        with pytest.raises(ContractError):
            ResolutionSpec(native=0, target=0, model_input=0)


class TestDegrade:
    def test_identity_path(self):
        img = np.random.default_rng(1).uniform(0, 1, (16, 16))
        spec = ResolutionSpec(native=16, target=16, model_input=16)
        assert degrade(img, spec) is not img
        assert np.array_equal(degrade(img, spec), img)

    def test_constant_preserved(self):
        spec = ResolutionSpec(native=16, target=4, model_input=16)
        out = degrade(np.full((16, 16), 0.37), spec)
        assert np.allclose(out, 0.37, atol=1e-12)

    def test_checkerboard_average(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        spec = ResolutionSpec(native=4, target=2, model_input=4)
        mid = box_downscale(board.astype(np.float64), 2)
        assert np.array_equal(mid, np.full((2, 2), 0.5))
        assert np.allclose(degrade(board.astype(np.float64), spec), 0.5, atol=1e-12)

    def test_wrong_native_rejected(self):
        spec = ResolutionSpec(native=16, target=8, model_input=16)
        with pytest.raises(ShapeError):
            degrade(np.zeros((8, 8)), spec)

    def test_energy_preserved_by_downscale(self):
        img = np.random.default_rng(2).uniform(0, 1, (32, 32))
        assert abs(box_downscale(img, 8).mean() - img.mean()) < 1e-12

    def test_energy_preserved_custom_factor(self):
        img = np.random.default_rng(3).uniform(0, 1, (30, 30))
        assert abs(box_downscale(img, 7).mean() - img.mean()) < 1e-12

    @given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
    def test_output_stays_in_unit_range(self, img):
        spec = ResolutionSpec(native=8, target=4, model_input=8)
        out = degrade(img, spec)
        assert out.min() >= -1e-12 and out.max() <= 1.0 + 1e-12
        assert out.shape == (8, 8)

    def test_upscale_only_path(self):
        img = np.random.default_rng(4).uniform(0, 1, (8, 8))
        spec = ResolutionSpec(native=8, target=8, model_input=4)
        assert degrade(img, spec).shape == (4, 4)


class TestBatches:
    def cached_manifest(self, num, size=4, findings=3):
        m = build_manifest(num, findings)
        for r in m.records:
            m._image_cache[r.image_path] = np.zeros((size, size))
        return m

    def test_batch_count_512_by_64(self):
        m = self.cached_manifest(512)
        out = list(batches(m, 64, shuffle_seed=0, epoch=0))
        assert len(out) == 8
        imgs, yf, yg = out[0]
        assert imgs.shape == (64, 4, 4)
        assert yf.shape == (64, 3)
        assert yg.shape == (64,)

    def test_partial_batch_kept(self):
        m = self.cached_manifest(10)
        sizes = [b[0].shape[0] for b in batches(m, 4, 0, 0)]
        assert sizes == [4, 4, 2]

    def test_oversized_batch_is_single(self):
        m = self.cached_manifest(5)
        assert len(list(batches(m, 100, 0, 0))) == 1

    def test_epoch_seeding_contract(self):
        assert np.array_equal(shuffled_indices(20, 7, 3), shuffled_indices(20, 7 ^ 3, 0))
        assert np.array_equal(shuffled_indices(20, 5, 1), shuffled_indices(20, 5, 1))
        assert not np.array_equal(shuffled_indices(20, 5, 1), shuffled_indices(20, 5, 2))

    def test_same_epoch_same_order(self):
        m = self.cached_manifest(9)
        a = [b[1] for b in batches(m, 4, 11, 2)]
        b = [b[1] for b in batches(m, 4, 11, 2)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_empty_manifest_rejected(self):
        m = Manifest(1, 3, ["a", "b", "c"], [], "train")
        with pytest.raises(ContractError):
            list(batches(m, 4, 0, 0))

    def test_bad_batch_size(self):
        with pytest.raises(ContractError):
            list(batches(self.cached_manifest(4), 0, 0, 0))


class TestGeneration:
    def test_round_trip_label_matrix(self, tiny_dataset):
        train, test, out, _ = tiny_dataset
        back = load_manifest(out / "train.csv")
        assert np.array_equal(back.label_matrix(), train.label_matrix())
        back_t = load_manifest(out / "test.csv")
        assert np.array_equal(back_t.label_matrix(), test.label_matrix())

    def test_byte_identical_regeneration(self, tmp_path):
        config = SyntheticConfig(num_samples=12, num_findings=3, image_size=32, seed=9)
        generate_synthetic(config, tmp_path / "a")
        generate_synthetic(config, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_all_normal_when_fraction_zero(self, tmp_path):
        config = SyntheticConfig(num_samples=10, num_findings=3, image_size=32,
                                 abnormal_fraction=0.0, seed=1)
        train, test = generate_synthetic(config, tmp_path)
        for m in (train, test):
            assert not m.label_matrix().any()
            assert not m.global_labels().any()

    def test_sample_count_and_prevalence(self, tmp_path):
        config = SyntheticConfig(num_samples=512, num_findings=4, image_size=32, seed=3)
        train, test = generate_synthetic(config, tmp_path)
        total = len(train) + len(test)
        assert total == 512
        abnormal = int(train.global_labels().sum() + test.global_labels().sum())
        lo = binom.ppf(0.005, 512, 0.5)
        hi = binom.ppf(0.995, 512, 0.5)
        assert lo <= abnormal <= hi

    def test_layout_and_metadata(self, tiny_dataset):
        _, _, out, config = tiny_dataset
        assert (out / "generation.json").exists()
        assert (out / "train.csv").exists()
        assert (out / "test.csv").exists()
        pgms = list((out / "images").glob("*.pgm"))
        assert len(pgms) == config.num_samples

    def test_split_ratio(self, tiny_dataset):
        train, test, _, config = tiny_dataset
        assert len(test) == config.num_samples // 6
        assert len(train) + len(test) == config.num_samples

    def test_global_label_consistency(self, tiny_dataset):
        train, _, _, _ = tiny_dataset
        y = train.label_matrix()
        g = train.global_labels()
        assert np.array_equal(g, y.any(axis=1).astype(np.int64))

    def test_images_decode_in_unit_range(self, tiny_dataset):
        train, _, _, _ = tiny_dataset
        img = train.image(train.records[0])
        assert img.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ContractError):
            SyntheticConfig(num_samples=0)
        with pytest.raises(ContractError):
            SyntheticConfig(blob_radius_range=(1, 4))
        with pytest.raises(ContractError):
            SyntheticConfig(abnormal_fraction=1.5)
        with pytest.raises(ContractError):
            SyntheticConfig(noise_sigma=-0.1)
