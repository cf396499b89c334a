from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthcomp.datagen import (
    FG_DEPTH,
    ImportLayout,
    OCCLUDER_DEPTH,
    OPEN_DEPTH,
    DatasetManifest,
    footprint,
    generate_samples,
    generate_scene,
    ground_truth_matches,
    import_external,
    load_dataset,
    occluder_union,
    placement_accuracy,
    rasterize,
    sample_rng,
    split_counts,
    split_samples,
    validate_splits,
    write_dataset,
)
from depthcomp.errors import DatasetError
from depthcomp.imaging import (
    DepthMap,
    ImageRgba,
    affine_place,
    alpha_over,
    save_depth,
    save_image,
    threshold_depth,
)


class TestScenes:
    def test_ground_truth_identity(self, scenes):
        assert all(ground_truth_matches(s) for s in scenes)

    def test_mask_is_occluder_union(self, scenes):
        for s in scenes:
            assert np.array_equal(threshold_depth(s.depth, 0.5).values.astype(bool), occluder_union(s.spec))

    def test_depth_ranges(self, scenes):
        for s in scenes:
            occ = occluder_union(s.spec)
            d = s.depth.values
            assert d[~occ].min() >= OPEN_DEPTH[0] - 1e-4 and d[~occ].max() <= OPEN_DEPTH[1] + 1e-4
            if occ.any():
                assert d[occ].min() >= OCCLUDER_DEPTH[0] - 1e-4 and d[occ].max() <= OCCLUDER_DEPTH[1] + 1e-4
            assert FG_DEPTH[0] <= s.spec.fg_depth < FG_DEPTH[1]

    def test_ground_truth_placement_valid(self, scenes):
        report = placement_accuracy([s.ground_truth for s in scenes], scenes)
        assert report.accuracy == 1.0 and report.empty == []

    def test_most_scenes_occluded(self, scenes):
        occluded = 0
        for s in scenes:
            naive = alpha_over(affine_place(s.foreground, s.spec.placement), s.background)
            occluded += not np.array_equal(naive.pixels, s.ground_truth.pixels)
        assert occluded >= len(scenes) // 2

    def test_foreground_opaque_or_half(self, scenes):
        for s in scenes:
            codes = set(np.unique(np.round(s.foreground.alpha * 255)).astype(int).tolist())
            assert codes <= {0, 128, 255}

    def test_order_independent(self):
        a = generate_samples(5, seed=3)
        b = generate_samples(2, seed=3, start=3)
        c = generate_samples(5, seed=3, workers=3)
        assert a[3].ground_truth == b[0].ground_truth
        assert all(x.ground_truth == y.ground_truth and x.meta == y.meta for x, y in zip(a, c))

    def test_seed_changes_output(self):
        assert generate_samples(1, seed=1)[0].ground_truth != generate_samples(1, seed=2)[0].ground_truth

    def test_canvas_guard(self):
        with pytest.raises(ValueError):
            generate_scene(sample_rng(0, 0), canvas=8)

    def test_threshold_guard(self):
        with pytest.raises(ValueError):
            generate_scene(sample_rng(0, 0), threshold=0.3)

    def test_rasterize_rect(self):
        cover = rasterize({"kind": "rect", "cx": 2.0, "cy": 2.0, "w": 2.0, "h": 0.0}, 5)
        assert cover.sum() == 3 and cover[2, 1:4].all()


class TestPlacement:
    def test_out_of_band_is_wrong(self, scenes):
        s = scenes[0]
        px = s.background.pixels.copy()
        px[0, 0, :3] = 1.0 - px[0, 0, :3]
        report = placement_accuracy([ImageRgba(px)], [s])
        assert report.correct == 0

    def test_empty_footprint_listed(self, scenes):
        report = placement_accuracy([scenes[0].background], scenes[:1])
        assert report.empty == [scenes[0].id]

    def test_footprint_threshold(self):
        bg = ImageRgba.filled(2, 1, [0.5, 0.5, 0.5, 1])
        px = bg.pixels.copy()
        px[0, 0, 0] += 10 / 255
        px[0, 1, 0] += 11 / 255
        assert footprint(ImageRgba(px), bg).tolist() == [[False, True]]


class TestSplits:
    def test_counts(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
        assert split_counts(7, (1, 1, 1)) == [3, 2, 2]
        assert sum(split_counts(13, (0.5, 0.3, 0.2))) == 13

    def test_overlap_rejected(self):
        with pytest.raises(DatasetError, match="both"):
            validate_splits({"train": ["a"], "test": ["a"]}, ["a"])

    def test_coverage_required(self):
        with pytest.raises(DatasetError):
            validate_splits({"train": ["a"]}, ["a", "b"])


class TestDatasetIO:
    def test_round_trip(self, tmp_path, scenes):
        manifest = write_dataset(scenes, tmp_path, threshold=0.5, seed=5)
        loaded, m2 = load_dataset(tmp_path)
        assert m2.splits == manifest.splits and m2.threshold == 0.5
        for a, b in zip(scenes, loaded):
            assert a.ground_truth == b.ground_truth and a.foreground == b.foreground
            assert np.max(np.abs(a.depth.values - b.depth.values)) <= 1e-6
        assert len(split_samples(loaded, m2, "train")) == 10

    def test_missing_file(self, tmp_path, scenes):
        write_dataset(scenes[:2], tmp_path)
        (tmp_path / "gt" / f"{scenes[1].id}.png").unlink()
        with pytest.raises(DatasetError, match="missing file"):
            load_dataset(tmp_path)

    def test_tampered_ground_truth(self, tmp_path, scenes):
        write_dataset(scenes[:2], tmp_path)
        save_image(scenes[0].background, tmp_path / "gt" / f"{scenes[0].id}.png")
        with pytest.raises(DatasetError, match="disagrees"):
            load_dataset(tmp_path)

    def test_bad_manifest_version(self, tmp_path, scenes):
        write_dataset(scenes[:1], tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["format_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="format_version"):
            load_dataset(tmp_path)

    def test_manifest_json_round_trip(self, scenes, tmp_path):
        m = write_dataset(scenes[:3], tmp_path, seed=1)
        assert DatasetManifest.from_json(m.to_json()) == m


class TestImport:
    def make(self, root, ids, size=32, skip=None):
        rng = np.random.default_rng(0)
        for sub in ("fg", "bg", "depth", "gt"):
            (root / sub).mkdir(parents=True, exist_ok=True)
            for i in ids:
                if skip == (sub, i):
                    continue
                if sub == "depth":
                    save_depth(DepthMap(rng.uniform(size=(size, size))), root / sub / f"{i}.png")
                else:
                    save_image(ImageRgba(rng.uniform(size=(size, size, 4))), root / sub / f"{i}.png")

    def test_resizes(self, tmp_path):
        self.make(tmp_path, ["a", "b"])
        samples = import_external(tmp_path, ImportLayout(size=16))
        assert [s.id for s in samples] == ["a", "b"]
        assert samples[0].background.width == 16 and samples[0].depth.width == 16

    def test_missing_depth_folder(self, tmp_path):
        self.make(tmp_path, ["a"])
        for p in (tmp_path / "depth").iterdir():
            p.unlink()
        (tmp_path / "depth").rmdir()
        with pytest.raises(DatasetError, match="precomputed"):
            import_external(tmp_path)

    def test_unmatched_ids(self, tmp_path):
        self.make(tmp_path, ["a", "b"], skip=("gt", "b"))
        with pytest.raises(DatasetError, match="unmatched ids: b"):
            import_external(tmp_path)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 50), st.sampled_from([16, 32, 64]))
def test_scene_invariants(seed, index, canvas):
    s = generate_scene(sample_rng(seed, index), canvas=canvas)
    assert ground_truth_matches(s)
    mask = threshold_depth(s.depth, 0.5).values.astype(bool)
    assert np.array_equal(mask, occluder_union(s.spec))
    # outside the mask the ground truth is the naive paste
    naive = alpha_over(affine_place(s.foreground, s.spec.placement), s.background).pixels
    gt = s.ground_truth.pixels
    assert np.max(np.abs(gt[~mask] - naive[~mask]), initial=0) <= 0.5 / 255 + 1e-6
    assert np.array_equal(gt[mask], s.background.pixels[mask])
