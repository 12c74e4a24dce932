import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vinil.datagen import (N_BACKGROUNDS, SHAPE_FAMILIES, InstanceSpec, Sample, ViewParams, augment,
                           augment_batch, background_pool, dataset_digest, gallery_views,
                           generate_dataset, load_folder_dataset, read_ppm, render, split_protocol,
                           write_folder_dataset, write_ppm)

# sha256 over ids, split flags and image bytes, pinned from the reference build
DIGEST_SEED0 = "2c36f5d9091c0af72d20a8fb4cdf320d1161e01261b140a8ef10282ed6ae11da"
DIGEST_TINY = "ae87a8ef218eca2bd209fb94568e4da0fe5b4aa4a3458024931fdc09f6ace307"


@pytest.fixture(scope="module")
def synth_a():
    return generate_dataset(seed=0)


def _tiny(**kw):
    args = dict(seed=0, n_categories=2, instances_per_category=2, views_per_instance=4, image_size=8)
    return generate_dataset(**(args | kw))


def _spec(category=0):
    return InstanceSpec(category=category, instance_id=0, hue=0.3, saturation=0.8, value=0.9,
                        size=0.9, aspect=1.1, texture_seed=12)


class TestGenerate:
    def test_count(self, synth_a):
        assert len(synth_a) == 960

    def test_image_contract(self, synth_a):
        for s in synth_a[::37]:
            assert s.image.shape == (3, 32, 32)
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_gallery_per_instance(self, synth_a):
        for iid in range(40):
            views = [s for s in synth_a if s.instance_id == iid]
            assert len(views) == 24
            assert sum(s.split == "gallery" for s in views) == 6
            assert len({s.category_id for s in views}) == 1

    def test_train_gallery_disjoint(self, synth_a):
        train = {(s.instance_id, s.view_id) for s in synth_a if s.split == "train"}
        gallery = {(s.instance_id, s.view_id) for s in synth_a if s.split == "gallery"}
        assert not train & gallery
        assert len(train | gallery) == 960

    def test_ordering(self, synth_a):
        keys = [(s.category_id, s.instance_id, s.view_id) for s in synth_a]
        assert keys == sorted(keys)

    def test_determinism(self):
        a, b = _tiny(), _tiny()
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))

    def test_seeds_differ(self):
        assert dataset_digest(_tiny(seed=0)) != dataset_digest(_tiny(seed=1))

    def test_pinned_digest(self, synth_a):
        assert dataset_digest(_tiny()) == DIGEST_TINY
        assert dataset_digest(synth_a) == DIGEST_SEED0

    def test_presets_differ(self):
        assert dataset_digest(_tiny(preset="synthA")) != dataset_digest(_tiny(preset="synthB"))

    def test_distinct_instance_parameters(self, synth_a):
        # two instances never render identically from the same view
        first = {s.instance_id: s.image for s in synth_a if s.view_id == 0}
        imgs = list(first.values())
        for i in range(len(imgs)):
            for j in range(i + 1, len(imgs)):
                assert not np.array_equal(imgs[i], imgs[j])

    @pytest.mark.parametrize("kwargs", [dict(n_categories=11), dict(n_categories=0),
                                        dict(views_per_instance=1), dict(gallery_fraction=0.0),
                                        dict(gallery_fraction=1.0), dict(instances_per_category=0),
                                        dict(preset="coil"), dict(image_size=2)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            _tiny(**kwargs)


class TestRender:
    @pytest.mark.parametrize("family", range(len(SHAPE_FAMILIES)))
    def test_rotation_periodic(self, family):
        spec = _spec(family)
        a = render(spec, ViewParams(angle=0.0), 16)
        b = render(spec, ViewParams(angle=2 * math.pi), 16)
        assert a.tobytes() == b.tobytes()

    def test_quantized(self):
        img = render(_spec(), ViewParams(angle=0.4, dx=0.1), 16)
        np.testing.assert_array_equal(np.round(img * 255), img * 255)

    def test_background_pool(self):
        pool = background_pool()
        assert len(pool) == N_BACKGROUNDS == 11
        assert len({tuple(np.round(b, 6)) for b, _ in pool}) == 11

    def test_backgrounds_change_image(self):
        a = render(_spec(), ViewParams(angle=0.0, background=0), 16)
        b = render(_spec(), ViewParams(angle=0.0, background=5), 16)
        assert not np.array_equal(a, b)


class TestPixelSeparability:
    def test_pixel_1nn(self, synth_a):
        gallery = [s for s in synth_a if s.split == "gallery"]
        x = np.stack([s.image.ravel() for s in gallery])
        ids = np.array([s.instance_id for s in gallery])
        d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        acc = float((ids[d.argmin(1)] == ids).mean())
        assert acc >= 0.95
        assert acc == 1.0  # 240 / 240 on seed 0


class TestGalleryViews:
    def test_count_and_spread(self):
        views = gallery_views(24, 0.25, 3)
        assert len(views) == 6
        assert sorted(views) == [3, 7, 11, 15, 19, 23]

    def test_no_train_left(self):
        with pytest.raises(ValueError):
            gallery_views(2, 0.9, 0)


class TestAugment:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        out = augment(img, np.random.default_rng(0), scale=1.0, aspect=1.0, corner=(0.0, 0.0))
        np.testing.assert_allclose(out, img, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(4, 12), st.integers(4, 12))
    def test_shape_and_range(self, seed, h, w):
        img = np.random.default_rng(seed).uniform(size=(3, h, w))
        out = augment(img, np.random.default_rng(seed))
        assert out.shape == img.shape
        assert out.min() >= 0 and out.max() <= 1

    def test_same_seed_same_crop(self):
        img = np.random.default_rng(1).uniform(size=(3, 10, 10))
        a = augment(img, np.random.default_rng(5))
        b = augment(img, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_crop_zooms(self):
        img = np.zeros((1, 8, 8))
        img[:, :4, :4] = 1.0
        out = augment(img, None, scale=0.25, aspect=1.0, corner=(0.0, 0.0))
        assert out.mean() > 0.9

    def test_batch(self):
        imgs = np.random.default_rng(2).uniform(size=(5, 3, 6, 6))
        out = augment_batch(imgs, np.random.default_rng(0))
        assert out.shape == imgs.shape
        assert not np.allclose(out, imgs)


class TestSplitProtocol:
    def test_default_stream(self, synth_a):
        stream = split_protocol(synth_a)
        assert len(stream) == 5
        for t, task in enumerate(stream.tasks):
            assert task.categories == (2 * t, 2 * t + 1)
            assert len(task.instance_ids) == 8
            assert len(task) == 8 * 18
            assert all(s.split == "train" for s in task.samples)
        assert len(stream.gallery) == 240

    def test_instance_disjoint_and_gallery_coverage(self, synth_a):
        stream = split_protocol(synth_a)
        seen = set()
        for task in stream.tasks:
            assert not seen & set(task.instance_ids)
            seen |= set(task.instance_ids)
        assert {s.instance_id for s in stream.gallery} == seen
        for s, t in zip(stream.gallery, stream.gallery_task_ids):
            assert s.instance_id in stream.tasks[t].instance_ids

    def test_instance_subtasks(self, synth_a):
        stream = split_protocol(synth_a, instance_subtasks=4)
        assert len(stream) == 20
        ids = [i for task in stream.tasks for i in task.instance_ids]
        assert len(ids) == len(set(ids)) == 40
        assert all(len(t.instance_ids) == 2 for t in stream.tasks)

    def test_insufficient_categories(self):
        with pytest.raises(ValueError, match="needs 6 categories"):
            split_protocol(_tiny(), n_tasks=3, categories_per_task=2)

    def test_seeded_order_stable(self, synth_a):
        a = split_protocol(synth_a, seed=3)
        b = split_protocol(synth_a, seed=3)
        assert [t.categories for t in a.tasks] == [t.categories for t in b.tasks]
        cats = [c for t in a.tasks for c in t.categories]
        assert sorted(cats) == list(range(10))

    def test_task_arrays(self, synth_a):
        task = split_protocol(synth_a).tasks[0]
        assert task.images().shape == (144, 3, 32, 32)
        assert set(task.instance_labels()) == set(task.instance_ids)


class TestFolders:
    def test_ppm_roundtrip(self, tmp_path):
        img = np.round(np.random.default_rng(0).uniform(size=(3, 5, 7)) * 255) / 255
        write_ppm(tmp_path / "a.ppm", img)
        assert read_ppm(tmp_path / "a.ppm").tobytes() == img.tobytes()

    def test_ppm_header_comment(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# note\n1 1\n255\n" + bytes([255, 0, 51]))
        np.testing.assert_allclose(read_ppm(p)[:, 0, 0], [1.0, 0.0, 0.2])

    @pytest.mark.parametrize("payload,match", [(b"P5\n1 1\n255\n\x00", "binary PPM"),
                                               (b"P6\n2 2\n255\n\x00\x00", "truncated"),
                                               (b"P6\n1 1\n65535\n\x00" * 2, "8-bit")])
    def test_bad_ppm(self, tmp_path, payload, match):
        p = tmp_path / "bad.ppm"
        p.write_bytes(payload)
        with pytest.raises(ValueError, match=match) as info:
            read_ppm(p)
        assert "bad.ppm" in str(info.value)

    def test_two_categories_one_instance(self, tmp_path):
        samples = [Sample(np.full((3, 4, 4), v / 10), c, c, v) for c in range(2) for v in range(3)]
        write_folder_dataset(samples, tmp_path)
        loaded = load_folder_dataset(tmp_path, gallery_fraction=0.34)
        assert len(loaded) == 6
        assert [(s.category_id, s.instance_id, s.view_id) for s in loaded] == \
               [(s.category_id, s.instance_id, s.view_id) for s in samples]

    def test_roundtrip_generated(self, tmp_path):
        ds = _tiny()
        write_folder_dataset(ds, tmp_path)
        loaded = load_folder_dataset(tmp_path)
        assert [s.split for s in loaded] == [s.split for s in ds]
        assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(ds, loaded))
        again = load_folder_dataset(tmp_path)
        assert [(s.instance_id, s.view_id) for s in again] == [(s.instance_id, s.view_id) for s in loaded]

    def test_empty_directory_warns(self, tmp_path):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert load_folder_dataset(tmp_path) == []
        assert any("empty" in str(w.message) for w in caught)

    def test_inconsistent_sizes(self, tmp_path):
        d = tmp_path / "c0" / "i0"
        d.mkdir(parents=True)
        write_ppm(d / "v0.ppm", np.zeros((3, 4, 4)))
        write_ppm(d / "v1.ppm", np.zeros((3, 5, 4)))
        with pytest.raises(ValueError, match="v1.ppm"):
            load_folder_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(ValueError, match="not a directory"):
            load_folder_dataset(tmp_path / "nope")
