import math

import numpy as np
import pytest
import torch

from vdlf import rng as rngmod
from vdlf.dataio import (
    RECORD_SIZE,
    AugmentPolicy,
    ClassSplit,
    ImageSet,
    LabeledImage,
    augment,
    episode_stream,
    load_cifar100,
    load_image_folder,
    make_synthetic_dataset,
    parse_cifar100_binary,
    read_split_manifest,
    sample_episode,
    serialize_cifar100_binary,
    split_from_manifest,
    write_split_manifest,
)
from vdlf.errors import ConfigError, CorruptRecordError, DataError, EpisodeSamplingError, MalformedFileError


def _random_records(n, seed=0):
    r = np.random.default_rng(seed)
    recs = r.integers(0, 256, size=(n, RECORD_SIZE), dtype=np.uint8)
    recs[:, 0] = r.integers(0, 20, size=n)
    recs[:, 1] = r.integers(0, 100, size=n)
    return recs


class TestCifarBinary:
    def test_zero_record(self):
        images = parse_cifar100_binary(bytes(3074))
        assert len(images) == 1
        img = images[0]
        assert img.label == 0
        assert img.pixels.shape == (3, 32, 32)
        assert float(img.pixels.abs().max()) == 0.0

    def test_record_arithmetic_matches_official_sizes(self):
        # cifar-100-binary: train.bin 50,000 records, test.bin 10,000 records
        assert RECORD_SIZE == 1 + 1 + 32 * 32 * 3
        assert 50_000 * RECORD_SIZE == 153_700_000
        assert 10_000 * RECORD_SIZE == 30_740_000

    def test_off_by_one_length(self):
        with pytest.raises(MalformedFileError):
            parse_cifar100_binary(bytes(3075))

    def test_label_out_of_range(self):
        rec = bytearray(3074)
        rec[1] = 100
        with pytest.raises(CorruptRecordError):
            parse_cifar100_binary(bytes(rec))

    def test_layout_is_channel_major_and_scaled(self):
        recs = _random_records(3)
        images = parse_cifar100_binary(recs.tobytes())
        for i in range(3):
            img = images[i]
            assert img.label == recs[i, 1]
            # red plane first, then green, then blue; row-major within a plane
            assert img.pixels[0, 0, 0].item() == pytest.approx(recs[i, 2] / 255.0)
            assert img.pixels[0, 0, 1].item() == pytest.approx(recs[i, 3] / 255.0)
            assert img.pixels[1, 0, 0].item() == pytest.approx(recs[i, 2 + 1024] / 255.0)
            assert img.pixels[2, 31, 31].item() == pytest.approx(recs[i, -1] / 255.0)

    def test_round_trip_bytes(self):
        data = _random_records(17, seed=3).tobytes()
        assert serialize_cifar100_binary(parse_cifar100_binary(data)) == data

    def test_load_directory(self, tmp_path):
        (tmp_path / "train.bin").write_bytes(_random_records(5).tobytes())
        (tmp_path / "test.bin").write_bytes(_random_records(2, seed=1).tobytes())
        train, test = load_cifar100(tmp_path)
        assert (len(train), len(test)) == (5, 2)
        with pytest.raises(DataError, match="test.bin"):
            (tmp_path / "test.bin").unlink()
            load_cifar100(tmp_path)


class TestSynthetic:
    def test_deterministic(self):
        a = make_synthetic_dataset(2, 10, 16, 42)
        b = make_synthetic_dataset(2, 10, 16, 42)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_zero_noise_identical_within_class(self):
        d = make_synthetic_dataset(3, 5, 16, 1, noise=0.0)
        for c, members in d.class_indices().items():
            first = d.images[members[0]]
            assert all(np.array_equal(first, d.images[m]) for m in members)

    def test_counts_balanced(self):
        d = make_synthetic_dataset(5, 100, 32, 7)
        assert len(d) == 500
        assert np.bincount(d.labels).tolist() == [100] * 5

    def test_range_and_type(self):
        d = make_synthetic_dataset(4, 3, 8, 0)
        assert d.images.min() >= 0.0 and d.images.max() <= 1.0
        assert isinstance(d[0], LabeledImage)

    def test_classes_distinct(self):
        d = make_synthetic_dataset(6, 1, 16, 0, noise=0.0)
        for i in range(6):
            for j in range(i + 1, 6):
                assert not np.allclose(d.images[i], d.images[j])

    @pytest.mark.parametrize("args", [(1, 5, 16, 0), (3, 5, 7, 0)])
    def test_preconditions(self, args):
        with pytest.raises(ConfigError):
            make_synthetic_dataset(*args)

    def test_written_in_cifar_layout(self):
        d = make_synthetic_dataset(3, 4, 32, 0)
        back = parse_cifar100_binary(serialize_cifar100_binary(d))
        assert np.array_equal(back.labels, d.labels)
        assert np.abs(back.images - d.images).max() <= 0.5 / 255 + 1e-7


class TestSplits:
    def test_proportional_64_16_20(self):
        s = ClassSplit.proportional(100)
        assert (len(s.train), len(s.val), len(s.test)) == (64, 16, 20)
        s.check_covers(100)

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            ClassSplit((0, 1), (1,), (2,))

    def test_manifest_round_trip(self, tmp_path):
        names = [f"c{i}" for i in range(10)]
        split = ClassSplit.proportional(10, seed=3)
        path = tmp_path / "split.csv"
        path.write_text(write_split_manifest(split, names))
        assert split_from_manifest(read_split_manifest(path), names) == split

    def test_shipped_miniimagenet_manifest(self):
        from vdlf.config import resolve_manifest

        rows = read_split_manifest(resolve_manifest("builtin:miniimagenet_split.csv"))
        counts = {k: sum(1 for s, _ in rows if s == k) for k in ("train", "val", "test")}
        assert counts == {"train": 64, "val": 16, "test": 20}
        assert len({name for _, name in rows}) == 100

    def test_bad_manifest_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("train,a\nbogus line\n")
        with pytest.raises(ConfigError):
            read_split_manifest(p)


def _write_ppm(path, arr):
    h, w, _ = arr.shape
    path.write_bytes(f"P6\n# test\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes())


class TestFolderLoader:
    def test_loads_and_resizes(self, tmp_path):
        r = np.random.default_rng(0)
        for name in ("a", "b", "c"):
            (tmp_path / name).mkdir()
            for i in range(2):
                _write_ppm(tmp_path / name / f"{i}.ppm", r.integers(0, 256, size=(10, 12, 3)))
        np.save(tmp_path / "c" / "extra.npy", r.integers(0, 256, size=(8, 8, 3)).astype(np.uint8))
        manifest = tmp_path / "split.csv"
        manifest.write_text("train,a\nval,b\ntest,c\n")
        data, split = load_image_folder(tmp_path, manifest, image_side=8)
        assert data.images.shape == (7, 3, 8, 8)
        assert data.class_names == ["a", "b", "c"]
        assert split == ClassSplit((0,), (1,), (2,))

    def test_ppm_pixels_exact_without_resize(self, tmp_path):
        arr = np.arange(4 * 4 * 3).reshape(4, 4, 3) * 5
        (tmp_path / "a").mkdir()
        _write_ppm(tmp_path / "a" / "x.ppm", arr)
        m = tmp_path / "m.csv"
        m.write_text("train,a\n")
        data, _ = load_image_folder(tmp_path, m, image_side=4)
        np.testing.assert_allclose(data.images[0], arr.transpose(2, 0, 1) / 255.0, atol=1e-7)

    def test_missing_class_folder(self, tmp_path):
        m = tmp_path / "m.csv"
        m.write_text("train,nope\n")
        with pytest.raises(DataError, match="nope"):
            load_image_folder(tmp_path, m)


class TestEpisodes:
    @pytest.fixture
    def pool(self):
        return make_synthetic_dataset(10, 20, 8, 0)

    @pytest.mark.parametrize("k_shot", [1, 5])
    def test_sizes(self, pool, k_shot):
        ep = sample_episode(pool, range(10), 5, k_shot, 15, np.random.default_rng(0))
        assert len(ep.support) == 5 * k_shot
        assert len(ep.query) == 75

    def test_structure(self, pool):
        ep = sample_episode(pool, range(10), 5, 5, 15, np.random.default_rng(1))
        assert len(set(ep.classes.tolist())) == 5
        assert np.bincount(ep.support_y).tolist() == [5] * 5
        assert np.bincount(ep.query_y).tolist() == [15] * 5
        assert not set(ep.support_idx.tolist()) & set(ep.query_idx.tolist())
        # positions follow draw order
        for pos, c in enumerate(ep.classes):
            assert (pool.labels[ep.support_idx[ep.support_y == pos]] == c).all()
            assert (pool.labels[ep.query_idx[ep.query_y == pos]] == c).all()

    def test_deficient_class_named(self):
        labels = np.repeat(np.arange(5), 20)
        labels = labels[labels != 3]
        labels = np.concatenate([labels, np.full(19, 3)])
        pool = ImageSet(np.zeros((len(labels), 1, 2, 2)), labels)
        with pytest.raises(EpisodeSamplingError, match="'3'.*19 images"):
            sample_episode(pool, range(5), 5, 5, 15, np.random.default_rng(0))

    def test_too_few_classes(self, pool):
        with pytest.raises(EpisodeSamplingError):
            sample_episode(pool, range(3), 5, 1, 1, np.random.default_rng(0))

    def test_replayable(self, pool):
        a = list(episode_stream(pool, range(10), 5, 1, 3, 9, "x", 20))
        b = list(episode_stream(pool, range(10), 5, 1, 3, 9, "x", 20))
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.support_idx, eb.support_idx)
            assert np.array_equal(ea.query_idx, eb.query_idx)

    def test_no_overlap_over_many_episodes(self, pool):
        for ep in episode_stream(pool, range(10), 5, 5, 15, 0, "overlap", 1000):
            assert not np.intersect1d(ep.support_idx, ep.query_idx).size


class TestAugment:
    def test_identity_policy_train_equals_eval(self):
        img = torch.rand(3, 8, 8)
        p = AugmentPolicy(pad=0, hflip_prob=0.0, rotation_degrees=0.0, mean=(0.1, 0.2, 0.3), std=(1, 2, 3))
        a = augment(img, p, np.random.default_rng(0), True)
        b = augment(img, p, None, False)
        assert torch.equal(a, b)

    def test_identity_normalization(self):
        img = torch.rand(3, 8, 8)
        assert torch.equal(augment(img, AugmentPolicy(), None, False), img)

    def test_forced_arithmetic(self):
        img = torch.full((3, 4, 4), 0.5)
        out = augment(img, AugmentPolicy(mean=(0.5,) * 3, std=(0.25,) * 3), None, False)
        assert torch.equal(out, torch.zeros(3, 4, 4))

    def test_deterministic_under_stream(self):
        img = torch.rand(3, 16, 16)
        p = AugmentPolicy(pad=2, hflip_prob=0.5, rotation_degrees=10)
        a = augment(img, p, rngmod.stream(0, "aug"), True)
        b = augment(img, p, rngmod.stream(0, "aug"), True)
        assert torch.equal(a, b)

    def test_flip_always(self):
        img = torch.rand(3, 4, 4)
        out = augment(img, AugmentPolicy(hflip_prob=1.0), np.random.default_rng(0), True)
        assert torch.equal(out, img.flip(-1))

    def test_pad_crop_is_a_shift(self):
        img = torch.rand(1, 6, 6)
        p = AugmentPolicy(pad=2, mean=(0.0,), std=(1.0,))
        out = augment(img, p, np.random.default_rng(5), True)
        padded = torch.nn.functional.pad(img, (2, 2, 2, 2))
        windows = [padded[:, i:i + 6, j:j + 6] for i in range(5) for j in range(5)]
        assert any(torch.equal(out, w) for w in windows)

    def test_policy_validation(self):
        with pytest.raises(ConfigError):
            AugmentPolicy(hflip_prob=1.5)
        with pytest.raises(ConfigError):
            AugmentPolicy(std=(1.0, 0.0, 1.0))
