import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ddpdenoise.data import (DatasetManifest, ImageRecord, NoiseSpec, corrupt, corrupt_manifest,
                             decode_image, encode_image, gen_synthetic_phantoms, make_batches,
                             noise_field, resize_bilinear, shard_indices, split_counts,
                             split_dataset, write_clean_set)
from ddpdenoise.errors import ConfigError, DecodeError, DomainError, FormatError
from ddpdenoise.metrics import psnr
from ddpdenoise.rng import box_muller, fisher_yates, keyed_generator


class TestImageFiles:
    def test_pgm_extremes(self, tmp_path):
        raw = np.array([[0, 255], [128, 1]], np.uint8)
        Image.fromarray(raw).save(tmp_path / "a.pgm")
        rec = decode_image(tmp_path / "a.pgm")
        assert rec.id == "a"
        assert rec.pixels[0, 1] == 1.0 and rec.pixels[0, 0] == 0.0

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_round_trip(self, tmp_path, suffix):
        img = np.random.default_rng(0).random((17, 23)).astype(np.float32)
        encode_image(img, tmp_path / f"x{suffix}")
        back = decode_image(tmp_path / f"x{suffix}").pixels
        assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-7

    def test_color_rejected(self, tmp_path):
        Image.new("RGB", (4, 4)).save(tmp_path / "c.png")
        with pytest.raises(FormatError):
            decode_image(tmp_path / "c.png")

    def test_sixteen_bit_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4), np.uint16) + 300).save(tmp_path / "d.png")
        with pytest.raises(FormatError):
            decode_image(tmp_path / "d.png")

    def test_not_an_image(self, tmp_path):
        (tmp_path / "n.png").write_bytes(b"hello world")
        with pytest.raises(FormatError):
            decode_image(tmp_path / "n.png")

    def test_truncated(self, tmp_path):
        img = np.random.default_rng(1).random((64, 64))
        encode_image(img, tmp_path / "t.png")
        raw = (tmp_path / "t.png").read_bytes()
        (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(DecodeError):
            decode_image(tmp_path / "t.png")

    def test_unknown_suffix(self, tmp_path):
        with pytest.raises(FormatError):
            encode_image(np.zeros((2, 2)), tmp_path / "x.jpg")


class TestResize:
    def test_constant(self):
        rec = resize_bilinear(ImageRecord("c", np.full((10, 10), 0.4, np.float32)), 4)
        np.testing.assert_allclose(rec.pixels, 0.4, rtol=1e-6)

    def test_same_size_identity(self):
        img = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        assert np.array_equal(resize_bilinear(ImageRecord("i", img), 8).pixels, img)

    def test_center_sample(self):
        img = np.array([[0, 1], [2, 3]], np.float32) / 3
        assert resize_bilinear(ImageRecord("s", img), 1).pixels[0, 0] == pytest.approx(0.5)


class TestNoise:
    def test_sigma_zero(self):
        img = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        out = corrupt(ImageRecord("z", img), NoiseSpec(0.1, 0.0, 3)).pixels
        expected = np.clip(img.astype(np.float64) + 0.1, 0, 1).astype(np.float32)
        assert np.array_equal(out, expected)

    def test_keyed_by_seed_and_id(self):
        img = np.full((8, 8), 0.5, np.float32)
        a = corrupt(ImageRecord("p", img), NoiseSpec(seed=5)).pixels
        b = corrupt(ImageRecord("p", img), NoiseSpec(seed=5)).pixels
        c = corrupt(ImageRecord("q", img), NoiseSpec(seed=5)).pixels
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_negative_sigma(self):
        with pytest.raises(ConfigError):
            NoiseSpec(sigma=-0.1)

    @pytest.mark.parametrize("sigma", [0.1, 0.2, 0.3])
    def test_statistics(self, sigma):
        z = noise_field(NoiseSpec(0.1, sigma, 0, clamp=False), "stats", (1000, 1000))
        assert abs(z.mean() - 0.1) <= 4 * sigma / 1000
        assert abs(z.std() - sigma) <= 0.01 * sigma

    def test_obfuscation_psnr(self):
        clean = np.full((1000, 1000), 0.5, np.float32)
        noisy = corrupt(ImageRecord("big", clean), NoiseSpec(0.1, 0.1, 0, clamp=False)).pixels
        assert psnr(noisy, clean) == pytest.approx(10 * math.log10(1 / 0.02), abs=0.1)

    def test_clamp(self):
        out = corrupt(ImageRecord("c", np.full((50, 50), 0.95, np.float32)), NoiseSpec(sigma=0.3)).pixels
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_box_muller_moments(self):
        z = box_muller(keyed_generator(1, "bm"), 200001)
        assert z.size == 200001
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
        assert abs(np.mean(z ** 3)) < 0.03 and abs(np.mean(z ** 4) - 3) < 0.05

    def test_keyed_streams_independent_of_order(self):
        a = keyed_generator(3, "x").random(4)
        keyed_generator(3, "y").random(100)
        assert np.array_equal(a, keyed_generator(3, "x").random(4))


class TestSplits:
    def test_small(self):
        assert split_counts(10, (0.5, 0.3, 0.2)) == (5, 3, 2)

    def test_all_train(self):
        ids = [str(i) for i in range(7)]
        s = split_dataset(ids, (1.0, 0.0, 0.0))
        assert sorted(s["train"]) == sorted(ids) and s["val"] == [] and s["test"] == []

    def test_full_scale(self):
        assert split_counts(15000, (0.5, 0.33, 0.17)) == (7500, 4950, 2550)

    def test_empty(self):
        with pytest.raises(DomainError):
            split_dataset([])

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            split_counts(10, (0.5, 0.5, 0.5))

    @given(st.integers(1, 200), st.integers(0, 1000))
    def test_disjoint_covering_reproducible(self, n, seed):
        ids = [f"id{i}" for i in range(n)]
        s = split_dataset(ids, seed=seed)
        parts = s["train"] + s["val"] + s["test"]
        assert sorted(parts) == sorted(ids)
        assert s == split_dataset(ids, seed=seed)

    @given(st.integers(1, 50), st.integers(0, 100))
    def test_fisher_yates_permutation(self, n, seed):
        assert sorted(fisher_yates(n, keyed_generator(seed))) == list(range(n))


class TestShards:
    def test_even(self):
        assert shard_indices(4, 2, 0) == [0, 2]
        assert shard_indices(4, 2, 1) == [1, 3]

    def test_padding(self):
        assert shard_indices(5, 2, 0) == [0, 2, 4]
        assert shard_indices(5, 2, 1) == [1, 3, 0]

    def test_world_one(self):
        perm = shard_indices(9, 1, 0, epoch=2, shuffle=True, seed=4)
        assert sorted(perm) == list(range(9))
        assert perm == fisher_yates(9, keyed_generator(4, "epoch", 2))

    def test_bad_world(self):
        with pytest.raises(ConfigError):
            shard_indices(4, 0, 0)

    @given(st.integers(1, 100), st.integers(1, 8), st.integers(0, 5), st.booleans())
    def test_exactly_once(self, n, world, epoch, shuffle):
        shards = [shard_indices(n, world, r, epoch, shuffle, seed=1) for r in range(world)]
        assert len({len(s) for s in shards}) == 1
        # strip the padding: the first n entries of the interleaved order
        interleaved = [shards[i % world][i // world] for i in range(len(shards[0]) * world)]
        assert sorted(interleaved[:n]) == list(range(n))

    def test_epochs_differ(self):
        assert shard_indices(50, 2, 0, 0, True) != shard_indices(50, 2, 0, 1, True)


class TestBatches:
    def test_drop_last(self):
        assert [len(b) for b in make_batches(list(range(10)), 4, drop_last=True)] == [4, 4]

    def test_keep(self):
        assert [len(b) for b in make_batches(list(range(10)), 4)] == [4, 4, 2]

    def test_large_batch(self):
        assert make_batches(list(range(3)), 8) == [[0, 1, 2]]


class TestPhantoms:
    def test_deterministic(self):
        a = gen_synthetic_phantoms(3, 32, 9)
        b = gen_synthetic_phantoms(3, 32, 9)
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
        assert [r.id for r in a] == ["phantom_00000", "phantom_00001", "phantom_00002"]

    def test_intensity_band(self):
        means = [r.pixels.mean() for r in gen_synthetic_phantoms(100, 64, 0)]
        assert 0.1 < np.mean(means) < 0.7

    def test_range_and_variety(self):
        recs = gen_synthetic_phantoms(4, 64, 0)
        assert all(r.pixels.min() >= 0 and r.pixels.max() <= 1 for r in recs)
        assert not np.array_equal(recs[0].pixels, recs[1].pixels)


def build_manifest(root, count=6, size=16, sigma=0.1):
    recs = gen_synthetic_phantoms(count, size, 0)
    rows = write_clean_set(recs, root / "clean", root)
    m = DatasetManifest(rows, split_dataset([r.id for r in recs]), size, 0, root=root)
    return corrupt_manifest(m, NoiseSpec(0.1, sigma, 2))


class TestManifest:
    def test_save_load(self, tmp_path):
        m = build_manifest(tmp_path)
        m.save(tmp_path / "m.json")
        back = DatasetManifest.load(tmp_path / "m.json")
        assert back == m and back.root == tmp_path
        back.validate(need_noisy=True)

    def test_pairs(self, tmp_path):
        m = build_manifest(tmp_path)
        noisy, clean = m.load_pairs(m.split["train"])
        assert noisy.shape == clean.shape == (len(m.split["train"]), 1, 16, 16)
        assert noisy.dtype == np.float32

    def test_validate_overlap(self, tmp_path):
        m = build_manifest(tmp_path)
        m.split["val"] = m.split["val"] + m.split["train"][:1]
        with pytest.raises(ConfigError):
            m.validate()

    def test_validate_needs_noise(self, tmp_path):
        recs = gen_synthetic_phantoms(2, 8, 0)
        m = DatasetManifest(write_clean_set(recs, tmp_path, tmp_path),
                            {"train": [r.id for r in recs], "val": [], "test": []}, 8, 0, root=tmp_path)
        m.validate()
        with pytest.raises(ConfigError):
            m.validate(need_noisy=True)

    def test_bad_version(self, tmp_path):
        (tmp_path / "m.json").write_text('{"version": 99}')
        with pytest.raises(FormatError):
            DatasetManifest.load(tmp_path / "m.json")

    def test_deterministic_bytes(self, tmp_path):
        a = build_manifest(tmp_path / "a")
        b = build_manifest(tmp_path / "b")
        assert a.to_json() == b.to_json()
        for ra, rb in zip(a.records, b.records):
            assert (a.root / ra["noisy"]).read_bytes() == (b.root / rb["noisy"]).read_bytes()
