"""Dataset loading, invariants, and the synthetic defect generator."""

import numpy as np
import pytest
import torch
from PIL import Image

from ddad.data import (
    DEFECT_TYPES,
    PATTERNS,
    Dataset,
    DatasetItem,
    SynthSpec,
    apply_defect,
    load_dataset,
    load_image,
    load_mask,
    nominal_image,
    synth_dataset,
    write_mvtec_layout,
)


def save_solid(path, rgb, size=8):
    Image.new("RGB", (size, size), rgb).save(path)


def make_tree(root, category="widget"):
    cat = root / category
    (cat / "train" / "good").mkdir(parents=True)
    (cat / "test" / "good").mkdir(parents=True)
    (cat / "test" / "dent").mkdir(parents=True)
    (cat / "ground_truth" / "dent").mkdir(parents=True)
    save_solid(cat / "train" / "good" / "000.png", (160, 160, 160))
    save_solid(cat / "train" / "good" / "001.png", (80, 120, 200))
    save_solid(cat / "test" / "good" / "000.png", (160, 160, 160))
    save_solid(cat / "test" / "dent" / "000.png", (20, 20, 20))
    mask = np.zeros((8, 8), np.uint8)
    mask[2:5, 3:6] = 255
    Image.fromarray(mask).save(cat / "ground_truth" / "dent" / "000_mask.png")
    return cat


class TestLoadDataset:
    def test_miniature_tree_splits(self, tmp_path):
        make_tree(tmp_path)
        ds = load_dataset(tmp_path, "widget", resolution=8)
        assert len(ds.split("train_good")) == 2
        assert len(ds.split("test_good")) == 1
        assert len(ds.split("test_defect")) == 1
        assert ds.split("test_defect")[0].defect_type == "dent"
        assert ds.resolution == 8

    def test_value_range_and_exact_grey(self, tmp_path):
        make_tree(tmp_path)
        ds = load_dataset(tmp_path, "widget", resolution=8)
        img = ds.split("train_good")[0].image
        assert img.dtype == np.float32
        want = 160 / 255 * 2 - 1
        assert np.allclose(img, want, atol=1e-6)

    def test_mask_binarized_at_half(self, tmp_path):
        cat = make_tree(tmp_path)
        levels = np.zeros((8, 8), np.uint8)
        levels[0, 0], levels[0, 1], levels[0, 2] = 0, 100, 200
        Image.fromarray(levels).save(cat / "ground_truth" / "dent" / "000_mask.png")
        m = load_mask(cat / "ground_truth" / "dent" / "000_mask.png", 8)
        assert m[0, 0] == 0 and m[0, 1] == 0 and m[0, 2] == 1
        assert set(np.unique(m)) <= {0, 1}

    def test_grayscale_replicated_to_three_channels(self, tmp_path):
        cat = make_tree(tmp_path)
        Image.new("L", (8, 8), 77).save(cat / "train" / "good" / "002.png")
        ds = load_dataset(tmp_path, "widget", resolution=8)
        grey = [it for it in ds.split("train_good") if it.path.endswith("002.png")][0]
        assert np.array_equal(grey.image[0], grey.image[1])
        assert np.array_equal(grey.image[1], grey.image[2])

    def test_missing_mask_names_file(self, tmp_path):
        cat = make_tree(tmp_path)
        (cat / "ground_truth" / "dent" / "000_mask.png").unlink()
        with pytest.raises(FileNotFoundError, match="000.png"):
            load_dataset(tmp_path, "widget", resolution=8)

    def test_unreadable_file_names_file(self, tmp_path):
        cat = make_tree(tmp_path)
        (cat / "train" / "good" / "003.png").write_bytes(b"not a png at all")
        with pytest.raises(RuntimeError, match="003.png"):
            load_dataset(tmp_path, "widget", resolution=8)

    def test_missing_train_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="train"):
            load_dataset(tmp_path, "nothing", resolution=8)

    def test_loading_is_idempotent(self, tmp_path):
        make_tree(tmp_path)
        a = load_dataset(tmp_path, "widget", resolution=8)
        b = load_dataset(tmp_path, "widget", resolution=8)
        for ia, ib in zip(a.items, b.items):
            assert np.array_equal(ia.image, ib.image)
            assert np.array_equal(ia.mask, ib.mask)

    def test_center_crop(self, tmp_path):
        cat = make_tree(tmp_path)
        # gradient image so the crop location is observable
        grad = np.tile(np.arange(16, dtype=np.uint8) * 16, (16, 1))
        Image.fromarray(np.stack([grad] * 3, axis=-1)).save(
            cat / "train" / "good" / "000.png"
        )
        full = load_image(cat / "train" / "good" / "000.png", 16)
        cropped = load_image(cat / "train" / "good" / "000.png", 16, crop=8)
        assert cropped.shape == (3, 8, 8)
        assert np.array_equal(cropped, full[:, 4:12, 4:12])


class TestDatasetInvariants:
    def _item(self, split, defect_type="good", mask_on=False, path=None, res=4):
        mask = np.zeros((res, res), np.uint8)
        if mask_on:
            mask[0, 0] = 1
        return DatasetItem(
            image=np.zeros((3, res, res), np.float32),
            split=split,
            defect_type=defect_type,
            mask=mask,
            path=path,
        )

    def test_train_item_with_mask_rejected(self):
        with pytest.raises(ValueError, match="defect-free"):
            Dataset([self._item("train_good", mask_on=True)], 4, "c")

    def test_defect_item_without_mask_rejected(self):
        with pytest.raises(ValueError, match="empty mask"):
            Dataset([self._item("test_defect", defect_type="dent")], 4, "c")

    def test_unknown_split_rejected(self):
        with pytest.raises(ValueError, match="unknown split"):
            Dataset([self._item("validation")], 4, "c")

    def test_leakage_between_splits_rejected(self):
        items = [
            self._item("train_good", path="/x/a.png"),
            self._item("test_good", path="/x/a.png"),
        ]
        with pytest.raises(ValueError, match="both train and test"):
            Dataset(items, 4, "c")

    def test_tensor_accessors(self):
        items = [self._item("train_good"), self._item("train_good")]
        ds = Dataset(items, 4, "c")
        imgs = ds.images("train_good")
        assert isinstance(imgs, torch.Tensor)
        assert imgs.shape == (2, 3, 4, 4) and imgs.dtype == torch.float32
        assert ds.images("test_defect").shape == (0, 3, 4, 4)
        assert ds.masks("train_good").shape == (2, 4, 4)


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(n_train=16, n_test=4, pattern="stripes", defect_types=("patch",))
        a = synth_dataset(spec, seed=7)
        b = synth_dataset(spec, seed=7)
        assert len(a.items) == len(b.items)
        for ia, ib in zip(a.items, b.items):
            assert np.array_equal(ia.image, ib.image)
            assert np.array_equal(ia.mask, ib.mask)
            assert ia.split == ib.split and ia.defect_type == ib.defect_type

    def test_seeds_differ(self):
        spec = SynthSpec(n_train=16, n_test=2)
        a = synth_dataset(spec, seed=0)
        b = synth_dataset(spec, seed=1)
        assert not np.array_equal(a.items[0].image, b.items[0].image)

    def test_counts_and_types_cycle(self):
        spec = SynthSpec(
            n_train=16, n_test=6, defect_types=("scratch", "patch", "color_spot")
        )
        ds = synth_dataset(spec, seed=3)
        assert len(ds.split("train_good")) == 16
        assert len(ds.split("test_good")) == 6
        defects = ds.split("test_defect")
        assert [it.defect_type for it in defects] == [
            "color_spot", "patch", "scratch", "color_spot", "patch", "scratch",
        ]

    def test_values_in_range(self):
        ds = synth_dataset(SynthSpec(n_train=16, n_test=2, pattern="blobs"), seed=5)
        for it in ds.items:
            assert it.image.min() >= -1.0 and it.image.max() <= 1.0

    def test_mask_area_bounds_over_many_samples(self):
        # 100 defects spread over every pattern/type combination
        rng = np.random.default_rng(11)
        count = 0
        while count < 100:
            for pattern in PATTERNS:
                for dtype in DEFECT_TYPES:
                    img = nominal_image(rng, pattern, 32)
                    _, mask = apply_defect(rng, img, dtype, pattern)
                    frac = mask.mean()
                    assert 0.01 <= frac <= 0.10, (pattern, dtype, frac)
                    count += 1

    def test_pixels_outside_mask_untouched(self):
        rng = np.random.default_rng(13)
        for dtype in DEFECT_TYPES:
            img = nominal_image(rng, "stripes", 32)
            out, mask = apply_defect(rng, img, dtype, "stripes")
            outside = mask == 0
            assert np.array_equal(out[:, outside], img[:, outside])
            inside = mask == 1
            assert float(np.abs(out[:, inside] - img[:, inside]).max()) > 0.05

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="resolution"):
            SynthSpec(resolution=48)
        with pytest.raises(ValueError, match="n_train"):
            SynthSpec(n_train=8)
        with pytest.raises(ValueError, match="pattern"):
            SynthSpec(pattern="plaid")
        with pytest.raises(ValueError, match="defect_types"):
            SynthSpec(defect_types=("rust",))
        with pytest.raises(ValueError, match="defect_types"):
            SynthSpec(defect_types=())

    def test_unknown_defect_type_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="unknown defect"):
            apply_defect(rng, nominal_image(rng, "stripes", 32), "rust", "stripes")


class TestRoundtrip:
    def test_write_then_load_preserves_dataset(self, tmp_path):
        spec = SynthSpec(
            n_train=16,
            n_test=3,
            pattern="checker",
            defect_types=("patch", "color_spot", "scratch"),
            resolution=32,
        )
        ds = synth_dataset(spec, seed=21)
        write_mvtec_layout(ds, tmp_path)
        loaded = load_dataset(tmp_path, ds.category, resolution=32)
        for split in ("train_good", "test_good", "test_defect"):
            assert len(loaded.split(split)) == len(ds.split(split))
        # PNG quantization costs at most half a step of 2/255
        orig = {("train_good", i): it for i, it in enumerate(ds.split("train_good"))}
        for i, it in enumerate(loaded.split("train_good")):
            assert np.allclose(it.image, orig[("train_good", i)].image, atol=1.01 / 255)
        # defect items reload in sorted-type order; compare per type
        by_type = {}
        for it in ds.split("test_defect"):
            by_type.setdefault(it.defect_type, []).append(it)
        loaded_by_type = {}
        for it in loaded.split("test_defect"):
            loaded_by_type.setdefault(it.defect_type, []).append(it)
        assert sorted(by_type) == sorted(loaded_by_type)
        for dtype, orig_items in by_type.items():
            for a, b in zip(orig_items, loaded_by_type[dtype]):
                assert np.array_equal(a.mask, b.mask)
                assert np.allclose(a.image, b.image, atol=1.01 / 255)
