import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from curioscene import render as rn
from curioscene import worlds
from curioscene.errors import (
    CapabilityError,
    FormatError,
    InvalidConfig,
    RejectionExhausted,
)


def rng_for(case):
    return np.random.default_rng(6000 + case)


# -- specs -------------------------------------------------------------


def test_named_worlds_validate():
    for name in worlds.WORLD_NAMES:
        spec = worlds.get_world(name)
        spec.validate()
        assert spec.name == name


def test_world_dof_bookkeeping():
    assert worlds.get_world("circles").dof == 2
    assert worlds.get_world("spheres").dof == 6
    assert worlds.get_world("varied").dof == 7
    assert worlds.get_world("spheres_light").dof == 8


def test_unknown_world_rejected():
    with pytest.raises(InvalidConfig):
        worlds.get_world("chairs")


def test_spec_validation_catches_inconsistencies():
    spec = worlds.get_world("spheres")
    spec.dof = 11
    with pytest.raises(InvalidConfig):
        spec.validate()
    spec = worlds.get_world("spheres")
    spec.camera = None
    with pytest.raises(InvalidConfig):
        spec.validate()
    spec = worlds.get_world("circles")
    spec.object_count = (0, 1)
    with pytest.raises(InvalidConfig):
        spec.validate()
    spec = worlds.get_world("circles")
    spec.groups = frozenset({"color"})
    with pytest.raises(InvalidConfig):
        spec.validate()


# -- sampling ----------------------------------------------------------


def test_circles_scene_has_one_positioned_object():
    spec = worlds.get_world("circles")
    for case in range(50):
        code = worlds.sample_scene(spec, rng_for(case))
        assert code.centers.shape == (1, 2)
        assert np.all(np.abs(code.centers) <= 0.7)
        assert code.rgbs is None
        assert code.confidences is None
        assert code.light is None


def test_varied_counts_uniform():
    spec = worlds.get_world("varied")
    rng = np.random.default_rng(99)
    counts = np.zeros(4, dtype=int)
    for _ in range(10_000):
        code = worlds.sample_scene(spec, rng)
        counts[code.n_objects - 2] += 1
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_spheres_never_intersect():
    spec = worlds.get_world("spheres")
    for case in range(200):
        code = worlds.sample_scene(spec, rng_for(case))
        deltas = code.centers[:, None, :] - code.centers[None, :, :]
        dists = np.sqrt((deltas**2).sum(axis=2))
        iu = np.triu_indices(3, k=1)
        assert dists[iu].min() > 2.0 * spec.radius


def test_rejection_exhausted_on_overdense_spec():
    spec = worlds.get_world("spheres")
    spec.ranges = dict(spec.ranges)
    spec.ranges["position"] = (np.full(3, -0.1), np.full(3, 0.1))
    with pytest.raises(RejectionExhausted):
        worlds.sample_scene(spec, np.random.default_rng(0))


def test_sphere_colors_within_range():
    spec = worlds.get_world("spheres")
    lo, hi = 1.0, 0.0
    for case in range(100):
        code = worlds.sample_scene(spec, rng_for(case))
        assert code.rgbs.shape == (3, 3)
        lo = min(lo, code.rgbs.min())
        hi = max(hi, code.rgbs.max())
    assert lo >= 0.2 and hi <= 1.0
    assert lo < 0.25 and hi > 0.95  # the range is actually exercised


def test_varied_confidences_are_existence_indicators():
    spec = worlds.get_world("varied")
    for case in range(30):
        code = worlds.sample_scene(spec, rng_for(case))
        assert 2 <= code.n_objects <= 5
        assert np.array_equal(code.confidences, np.ones(code.n_objects))


def test_light_sampled_on_hemisphere_patch():
    spec = worlds.get_world("spheres_light")
    for case in range(60):
        code = worlds.sample_scene(spec, rng_for(case))
        az, el = code.light
        assert 0.0 <= az < 2.0 * math.pi
        assert math.pi / 6.0 <= el <= math.pi / 2.0


def test_sampled_spheres_project_inside_frame():
    spec = worlds.get_world("spheres")
    cam = spec.camera
    f = cam.focal_pixels()
    for case in range(100):
        code = worlds.sample_scene(spec, rng_for(case))
        for center in code.centers:
            import curioscene.autodiff as ad

            uv, depth = rn.project(ad.Tape(), center, cam)
            r_px = f * spec.radius / depth.data
            assert uv.data[0] - r_px >= 0.0
            assert uv.data[0] + r_px <= cam.image_size
            assert uv.data[1] - r_px >= 0.0
            assert uv.data[1] + r_px <= cam.image_size


# -- dataset generation ------------------------------------------------


def test_split_sizes():
    assert worlds.split_sizes(2000) == (1000, 500, 500)
    assert worlds.split_sizes(8) == (4, 2, 2)
    assert worlds.split_sizes(10) == (5, 2, 3)
    assert worlds.split_sizes(3) == (1, 1, 1)
    with pytest.raises(InvalidConfig):
        worlds.split_sizes(2)


def test_generate_is_deterministic():
    spec = worlds.get_world("circles")
    a = worlds.generate_dataset(spec, 8, seed=31, image_size=16)
    b = worlds.generate_dataset(spec, 8, seed=31, image_size=16)
    assert np.array_equal(a.images, b.images)
    for i in range(8):
        assert np.array_equal(a.label(i).centers, b.label(i).centers)
    c = worlds.generate_dataset(spec, 8, seed=32, image_size=16)
    assert not np.array_equal(a.images, c.images)


def test_generate_split_indices_partition():
    spec = worlds.get_world("circles")
    ds = worlds.generate_dataset(spec, 9, seed=5, image_size=16)
    joined = np.concatenate([ds.split["train"], ds.split["val"], ds.split["test"]])
    assert sorted(joined.tolist()) == list(range(9))
    assert len(ds.split["train"]) == 4
    assert len(ds.split["val"]) == 2
    assert len(ds.split["test"]) == 3


def test_generate_workers_bitwise_equal():
    spec = worlds.get_world("circles")
    serial = worlds.generate_dataset(spec, 6, seed=12, image_size=16, workers=1)
    parallel = worlds.generate_dataset(spec, 6, seed=12, image_size=16, workers=2)
    assert np.array_equal(serial.images, parallel.images)
    for i in range(6):
        assert np.array_equal(serial.label(i).centers, parallel.label(i).centers)


def test_images_reproducible_from_labels():
    spec = worlds.get_world("spheres")
    ds = worlds.generate_dataset(spec, 4, seed=3, image_size=24)
    for i in range(4):
        again = worlds.render_label(spec, ds.label(i), 24)
        assert np.array_equal(ds.images[i], again)


# -- persistence -------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    spec = worlds.get_world("spheres_light")
    ds = worlds.generate_dataset(spec, 10, seed=21, image_size=16)
    path = tmp_path / "ds"
    worlds.save_dataset(ds, path)
    back = worlds.load_dataset(path, allow_labels=True)
    assert back.spec.name == "spheres_light"
    assert back.image_size == 16
    assert back.seed == 21
    assert np.array_equal(back.images, ds.images)
    for i in range(10):
        mine, theirs = ds.label(i), back.label(i)
        assert np.array_equal(mine.centers, theirs.centers)
        assert np.array_equal(mine.rgbs, theirs.rgbs)
        assert np.array_equal(mine.light, theirs.light)
    assert (path / "preview" / "0009.png").exists()
    preview = rn.read_png(path / "preview" / "0003.png")
    quantized = np.round(np.clip(ds.images[3], 0, 1) * 255.0) / 255.0
    assert np.array_equal(preview, quantized)


def test_reloaded_images_render_from_reloaded_labels(tmp_path):
    # The full round trip: JSON label floats must reproduce pixels bitwise.
    spec = worlds.get_world("varied")
    ds = worlds.generate_dataset(spec, 3, seed=8, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    back = worlds.load_dataset(tmp_path / "ds", allow_labels=True)
    for i in range(3):
        again = worlds.render_label(back.spec, back.label(i), back.image_size)
        assert np.array_equal(back.images[i], again)


def test_label_capability_gate(tmp_path):
    spec = worlds.get_world("circles")
    ds = worlds.generate_dataset(spec, 4, seed=2, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    closed = worlds.load_dataset(tmp_path / "ds")
    assert not closed.labels_allowed
    with pytest.raises(CapabilityError):
        closed.label(0)
    with pytest.raises(CapabilityError):
        closed.labels([1, 2])
    opened = worlds.load_dataset(tmp_path / "ds", allow_labels=True)
    assert opened.label(0).centers.shape == (1, 2)


def test_truncated_labels_name_the_record(tmp_path):
    spec = worlds.get_world("circles")
    ds = worlds.generate_dataset(spec, 5, seed=2, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    labels = tmp_path / "ds" / "labels.jsonl"
    lines = labels.read_text().splitlines()
    labels.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match="4"):
        worlds.load_dataset(tmp_path / "ds")
    labels.write_text("\n".join(lines[:2] + ["{broken"] + lines[3:]) + "\n")
    with pytest.raises(FormatError, match="record 2"):
        worlds.load_dataset(tmp_path / "ds")


def test_corrupt_images_detected(tmp_path):
    spec = worlds.get_world("circles")
    ds = worlds.generate_dataset(spec, 4, seed=2, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    images = tmp_path / "ds" / "images.bin"
    data = images.read_bytes()
    images.write_bytes(data[: len(data) - 100])
    with pytest.raises(FormatError, match="frame 3"):
        worlds.load_dataset(tmp_path / "ds")
    images.write_bytes(b"WRONG" + data[5:])
    with pytest.raises(FormatError):
        worlds.load_dataset(tmp_path / "ds")


def test_bad_meta_rejected(tmp_path):
    spec = worlds.get_world("circles")
    ds = worlds.generate_dataset(spec, 4, seed=2, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    meta = tmp_path / "ds" / "meta.txt"
    meta.write_text("world=circles\n")
    with pytest.raises(FormatError):
        worlds.load_dataset(tmp_path / "ds")
    meta.write_text("this is not a key value line\n")
    with pytest.raises(FormatError):
        worlds.load_dataset(tmp_path / "ds")


def test_meta_records_the_invented_defaults(tmp_path):
    spec = worlds.get_world("spheres")
    ds = worlds.generate_dataset(spec, 3, seed=2, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    meta = (tmp_path / "ds" / "meta.txt").read_text()
    assert "radius=0.5" in meta
    assert "position_lo=-2.0,-2.0,-1.0" in meta
    assert "groups=color,position" in meta


def test_labels_jsonl_uses_plain_arrays(tmp_path):
    spec = worlds.get_world("spheres")
    ds = worlds.generate_dataset(spec, 3, seed=4, image_size=16)
    worlds.save_dataset(ds, tmp_path / "ds")
    first = json.loads((tmp_path / "ds" / "labels.jsonl").read_text().splitlines()[0])
    assert set(first) == {"centers", "colors"}
    assert len(first["centers"]) == 3
    assert len(first["centers"][0]) == 3


# -- throughput --------------------------------------------------------


@pytest.mark.parametrize("name", ["circles", "spheres"])
def test_generation_throughput_at_64px(name):
    spec = worlds.get_world(name)
    start = time.perf_counter()
    worlds.generate_dataset(spec, 60, seed=1, image_size=64)
    elapsed = time.perf_counter() - start
    assert 60.0 / elapsed > 50.0
