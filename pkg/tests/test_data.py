"""Dataset container, loaders, and the procedural patch generator."""

import numpy as np
import pytest
from PIL import Image

from apdesc.data import (
    HPATCHES_VARIANTS,
    PatchDataset,
    SyntheticConfig,
    UBC_MOSAIC_SIZE,
    UBC_TILE,
    UBC_TILES_PER_MOSAIC,
    generate_synthetic,
    load_dataset,
    load_hpatches,
    load_ubc,
    save_dataset,
    split_by_sequence,
)
from apdesc.errors import DataFormatError


def tiny_dataset(n_groups=3, group_size=2, size=8, sequences=(0, 0, 1)):
    rng = np.random.default_rng(7)
    n = n_groups * group_size
    pixels = rng.uniform(0.0, 1.0, size=(n, size, size))
    group_ids = np.repeat(np.arange(n_groups), group_size)
    sequence_ids = np.repeat(np.asarray(sequences[:n_groups]), group_size)
    names = tuple(f"seq{i}" for i in range(int(max(sequences)) + 1))
    return PatchDataset(pixels, group_ids, sequence_ids, names)


class TestPatchDataset:
    def test_accessors(self):
        ds = tiny_dataset()
        assert len(ds) == 6
        assert ds.patch_size == 8
        assert ds.n_groups == 3
        assert ds.group_sizes() == {0: 2, 1: 2, 2: 2}
        assert ds.members(1).tolist() == [2, 3]
        assert ds.groups_in_sequence(0).tolist() == [0, 1]
        assert ds.groups_in_sequence(1).tolist() == [2]
        patch = ds[4]
        assert patch.group_id == 2 and patch.sequence_id == 1 and patch.tag == ""

    def test_group_spanning_sequences_is_rejected(self):
        pixels = np.zeros((2, 4, 4))
        with pytest.raises(ValueError, match="spans"):
            PatchDataset(pixels, [5, 5], [0, 1], ("a", "b"))

    def test_pixel_range_is_enforced(self):
        with pytest.raises(ValueError, match="pixel"):
            PatchDataset(np.full((1, 4, 4), 1.5), [0], [0], ("a",))

    def test_label_shapes_are_enforced(self):
        with pytest.raises(ValueError):
            PatchDataset(np.zeros((2, 4, 4)), [0], [0, 0], ("a",))

    def test_duplicate_sequence_names_are_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            PatchDataset(np.zeros((2, 4, 4)), [0, 1], [0, 1], ("a", "a"))

    def test_subset_keeps_labels_aligned(self):
        ds = tiny_dataset()
        sub = ds.subset(np.array([1, 4, 5]))
        assert len(sub) == 3
        assert sub.group_ids.tolist() == [0, 2, 2]
        assert sub.sequence_ids.tolist() == [0, 1, 1]
        assert np.array_equal(sub.pixels[0], ds.pixels[1])

    def test_resized_same_size_is_identity(self):
        ds = tiny_dataset()
        assert ds.resized(8) is ds

    def test_resized_changes_side_and_stays_in_range(self):
        ds = tiny_dataset(size=12)
        out = ds.resized(5)
        assert out.patch_size == 5
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
        assert np.array_equal(out.group_ids, ds.group_ids)


class TestSplitBySequence:
    def test_split_is_a_partition_of_whole_sequences(self):
        ds = generate_synthetic(SyntheticConfig(sequences=5, groups_per_sequence=3, group_size=2))
        train, val = split_by_sequence(ds, 2, seed=3)
        assert len(train) + len(val) == len(ds)
        train_seqs = set(train.sequence_ids.tolist())
        val_seqs = set(val.sequence_ids.tolist())
        assert not train_seqs & val_seqs
        assert len(val_seqs) == 2

    def test_split_is_seeded(self):
        ds = generate_synthetic(SyntheticConfig(sequences=5, groups_per_sequence=3, group_size=2))
        _, val_a = split_by_sequence(ds, 1, seed=11)
        _, val_b = split_by_sequence(ds, 1, seed=11)
        assert np.array_equal(val_a.pixels, val_b.pixels)

    def test_degenerate_counts_are_rejected(self):
        ds = tiny_dataset()
        for bad in (0, 2, 5):
            with pytest.raises(ValueError):
                split_by_sequence(ds, bad)


class TestContainerRoundTrip:
    def test_labels_survive_and_pixels_quantize_to_8_bits(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "d.npz"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert np.array_equal(back.group_ids, ds.group_ids)
        assert np.array_equal(back.sequence_ids, ds.sequence_ids)
        assert back.sequence_names == ds.sequence_names
        assert np.abs(back.pixels - ds.pixels).max() <= 0.5 / 255.0 + 1e-12

    def test_8_bit_grids_come_back_exactly(self, tmp_path):
        pixels = (np.arange(32, dtype=np.float64).reshape(2, 4, 4) % 256) / 255.0
        ds = PatchDataset(pixels, [0, 0], [0, 0], ("s",))
        path = tmp_path / "d.npz"
        save_dataset(path, ds)
        assert np.array_equal(load_dataset(path).pixels, pixels)

    def test_tags_survive(self, tmp_path):
        ds = tiny_dataset()
        tagged = PatchDataset(
            ds.pixels, ds.group_ids, ds.sequence_ids, ds.sequence_names,
            tuple("abcdef"),
        )
        path = tmp_path / "d.npz"
        save_dataset(path, tagged)
        assert load_dataset(path).tags == tuple("abcdef")

    def test_garbage_file_raises_data_error(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"this is not an archive")
        with pytest.raises(DataFormatError):
            load_dataset(path)


def write_mosaic_dir(root, n_patches, point_ids=None):
    """A mosaic directory whose tile t is the constant value t % 256."""
    root.mkdir(parents=True, exist_ok=True)
    if point_ids is None:
        point_ids = [t // 2 for t in range(n_patches)]
    root.joinpath("info.txt").write_text(
        "".join(f"{p} 0\n" for p in point_ids)
    )
    tiles_per_row = UBC_MOSAIC_SIZE // UBC_TILE
    n_mosaics = (n_patches + UBC_TILES_PER_MOSAIC - 1) // UBC_TILES_PER_MOSAIC
    for m in range(n_mosaics):
        img = np.zeros((UBC_MOSAIC_SIZE, UBC_MOSAIC_SIZE), dtype=np.uint8)
        for t in range(UBC_TILES_PER_MOSAIC):
            patch = m * UBC_TILES_PER_MOSAIC + t
            if patch >= n_patches:
                break
            r, c = divmod(t, tiles_per_row)
            img[r * UBC_TILE : (r + 1) * UBC_TILE, c * UBC_TILE : (c + 1) * UBC_TILE] = patch % 256
        Image.fromarray(img, mode="L").save(root / f"patches{m:04d}.bmp")
    return point_ids


class TestMosaicLoader:
    def test_tiles_map_to_index_lines_in_row_major_order(self, tmp_path):
        ids = write_mosaic_dir(tmp_path / "liberty", 40)
        ds = load_ubc(tmp_path / "liberty")
        assert len(ds) == 40
        assert ds.patch_size == UBC_TILE
        assert ds.group_ids.tolist() == ids
        assert np.all(ds.sequence_ids == 0)
        assert ds.sequence_names == ("liberty",)
        for t in (0, 1, 15, 16, 17, 39):
            assert np.all(ds.pixels[t] == (t % 256) / 255.0)

    def test_patches_continue_across_mosaics(self, tmp_path):
        n = UBC_TILES_PER_MOSAIC + 5
        write_mosaic_dir(tmp_path / "seq", n)
        ds = load_ubc(tmp_path / "seq")
        assert len(ds) == n
        t = UBC_TILES_PER_MOSAIC + 3
        assert np.all(ds.pixels[t] == (t % 256) / 255.0)

    def test_missing_index_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataFormatError, match="info.txt"):
            load_ubc(tmp_path / "empty")

    def test_bad_point_id_raises(self, tmp_path):
        write_mosaic_dir(tmp_path / "seq", 4)
        (tmp_path / "seq" / "info.txt").write_text("0 0\nnot-a-number 0\n")
        with pytest.raises(DataFormatError, match="bad point id"):
            load_ubc(tmp_path / "seq")

    def test_too_few_mosaics_raises(self, tmp_path):
        write_mosaic_dir(tmp_path / "seq", 4)
        ids = [t // 2 for t in range(UBC_TILES_PER_MOSAIC + 1)]
        (tmp_path / "seq" / "info.txt").write_text("".join(f"{p} 0\n" for p in ids))
        with pytest.raises(DataFormatError, match="mosaic"):
            load_ubc(tmp_path / "seq")

    def test_wrong_mosaic_shape_raises(self, tmp_path):
        write_mosaic_dir(tmp_path / "seq", 4)
        small = np.zeros((64, 64), dtype=np.uint8)
        Image.fromarray(small, mode="L").save(tmp_path / "seq" / "patches0000.bmp")
        with pytest.raises(DataFormatError, match="square mosaic"):
            load_ubc(tmp_path / "seq")


def write_stack_dir(root, rows_by_seq, patch=65, skip_variant=None, break_heights=False):
    """Sequence dirs of vertically stacked variants; pixel value encodes
    (sequence, row, variant) so the loader's unstacking is checkable."""
    root.mkdir(parents=True, exist_ok=True)
    for s, (name, rows) in enumerate(rows_by_seq):
        d = root / name
        d.mkdir()
        for v, variant in enumerate(HPATCHES_VARIANTS):
            if variant == skip_variant:
                continue
            height = rows + (1 if break_heights and v == 3 else 0)
            img = np.zeros((height * patch, patch), dtype=np.uint8)
            for r in range(height):
                img[r * patch : (r + 1) * patch] = 16 * s + 8 * r + v % 8
            Image.fromarray(img, mode="L").save(d / f"{variant}.png")


class TestStackLoader:
    def test_rows_become_groups_and_variants_become_tags(self, tmp_path):
        write_stack_dir(tmp_path / "hp", [("i_ajuntament", 3), ("v_wall", 2)])
        ds = load_hpatches(tmp_path / "hp")
        assert len(ds) == (3 + 2) * 16
        assert ds.patch_size == 65
        assert ds.sequence_names == ("i_ajuntament", "v_wall")
        assert ds.n_groups == 5
        assert sorted(ds.group_sizes().values()) == [16] * 5
        assert ds.groups_in_sequence(0).tolist() == [0, 1, 2]
        assert ds.groups_in_sequence(1).tolist() == [3, 4]
        k = 0
        for s, rows in ((0, 3), (1, 2)):
            for r in range(rows):
                for v, variant in enumerate(HPATCHES_VARIANTS):
                    assert ds.tags[k] == variant
                    expected = (16 * s + 8 * r + v % 8) / 255.0
                    assert np.all(ds.pixels[k] == expected)
                    k += 1

    def test_missing_variant_raises(self, tmp_path):
        write_stack_dir(tmp_path / "hp", [("i_a", 2)], skip_variant="h3")
        with pytest.raises(DataFormatError, match="h3"):
            load_hpatches(tmp_path / "hp")

    def test_disagreeing_heights_raise(self, tmp_path):
        write_stack_dir(tmp_path / "hp", [("i_a", 2)], break_heights=True)
        with pytest.raises(DataFormatError, match="disagree"):
            load_hpatches(tmp_path / "hp")

    def test_wrong_width_raises(self, tmp_path):
        write_stack_dir(tmp_path / "hp", [("i_a", 2)])
        bad = np.zeros((65, 64), dtype=np.uint8)
        Image.fromarray(bad, mode="L").save(tmp_path / "hp" / "i_a" / "ref.png")
        with pytest.raises(DataFormatError, match="vertical stack"):
            load_hpatches(tmp_path / "hp")

    def test_empty_root_raises(self, tmp_path):
        (tmp_path / "hp").mkdir()
        with pytest.raises(DataFormatError, match="no sequence"):
            load_hpatches(tmp_path / "hp")


class TestSynthetic:
    def test_shapes_and_labels_match_config(self):
        cfg = SyntheticConfig(sequences=3, groups_per_sequence=5, group_size=4, patch_size=16)
        ds = generate_synthetic(cfg)
        assert len(ds) == 3 * 5 * 4
        assert ds.patch_size == 16
        assert ds.n_groups == 15
        assert all(c == 4 for c in ds.group_sizes().values())
        for s in range(3):
            assert ds.groups_in_sequence(s).size == 5
        assert ds.pixels.min() >= 0.0 and ds.pixels.max() <= 1.0

    def test_generation_is_deterministic_in_the_seed(self):
        cfg = SyntheticConfig(sequences=2, groups_per_sequence=3, group_size=2, seed=9)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert np.array_equal(a.pixels, b.pixels)
        c = generate_synthetic(SyntheticConfig(sequences=2, groups_per_sequence=3, group_size=2, seed=10))
        assert not np.array_equal(a.pixels, c.pixels)

    def test_views_collapse_without_nuisances(self):
        cfg = SyntheticConfig(
            sequences=1, groups_per_sequence=2, group_size=3, warp=0.0, lighting=0.0
        )
        ds = generate_synthetic(cfg)
        for g in range(2):
            views = ds.pixels[ds.members(g)]
            assert np.array_equal(views[0], views[1])
            assert np.array_equal(views[0], views[2])
        assert not np.array_equal(ds.pixels[0], ds.pixels[3])

    def test_within_group_is_tighter_than_across_groups(self):
        ds = generate_synthetic(SyntheticConfig(seed=4))
        rng = np.random.default_rng(0)
        within, across = [], []
        for _ in range(300):
            g = int(rng.integers(ds.n_groups))
            i, j = rng.choice(ds.members(g), size=2, replace=False)
            within.append(np.linalg.norm(ds.pixels[i] - ds.pixels[j]))
            a, b = rng.integers(len(ds), size=2)
            if ds.group_ids[a] != ds.group_ids[b]:
                across.append(np.linalg.norm(ds.pixels[a] - ds.pixels[b]))
        assert np.mean(within) < 0.6 * np.mean(across)

    def test_shared_sequence_texture_makes_in_sequence_confusions_harder(self):
        ds = generate_synthetic(SyntheticConfig(sequence_similarity=0.7, seed=2))
        reps = {g: ds.pixels[ds.members(g)[0]] for g in range(ds.n_groups)}
        seq_of = {g: int(ds.sequence_ids[ds.members(g)[0]]) for g in range(ds.n_groups)}
        same_seq, other_seq = [], []
        groups = sorted(reps)
        for a in groups:
            for b in groups:
                if a >= b:
                    continue
                d = np.linalg.norm(reps[a] - reps[b])
                (same_seq if seq_of[a] == seq_of[b] else other_seq).append(d)
        assert np.mean(same_seq) < np.mean(other_seq)

    def test_invalid_configs_are_rejected(self):
        with pytest.raises(ValueError):
            SyntheticConfig(sequences=0)
        with pytest.raises(ValueError):
            SyntheticConfig(sequence_similarity=1.0)
