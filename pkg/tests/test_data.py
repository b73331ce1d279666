import numpy as np
import pytest
from PIL import Image

from cycle_vfi.data import (Clip, MotionSpec, SyntheticScene, load_dataset, load_frames,
                            make_eval_clips, make_triplets, random_crop_flip,
                            rendered_eval_clips, save_frames, synthetic_motion_dataset,
                            temporal_subsample, triplets_to_array)
from cycle_vfi.exceptions import IngestionError

SMALL = MotionSpec(n_shapes=12, n_blobs=3)


def numbered_clip(n, fps=240.0, size=4):
    return Clip([np.full((size, size, 3), k / 100, dtype=np.float32) for k in range(n)], fps=fps)


def ids(clip):
    return [int(round(f[0, 0, 0] * 100)) for f in clip.frames]


def test_temporal_subsample_examples():
    sub = temporal_subsample(numbered_clip(16), 8)
    assert ids(sub) == [0, 8] and sub.fps == 30.0
    assert ids(temporal_subsample(numbered_clip(9), 1)) == list(range(9))
    assert ids(temporal_subsample(numbered_clip(9), 4)) == [0, 4, 8]
    for bad in (0, -2):
        with pytest.raises(ValueError):
            temporal_subsample(numbered_clip(9), bad)


@pytest.mark.parametrize("a,b", [(2, 3), (3, 2), (1, 5), (4, 4)])
def test_subsample_composes(a, b):
    clip = numbered_clip(50)
    assert ids(temporal_subsample(temporal_subsample(clip, a), b)) == ids(temporal_subsample(clip, a * b))


def test_triplet_examples():
    assert len(make_triplets(numbered_clip(5), 1)) == 3
    assert all(len(make_triplets(numbered_clip(3), s)) == 1 for s in (1, 2, 7))
    assert make_triplets(numbered_clip(2)) == []
    t = make_triplets(numbered_clip(6), 2)[1]
    assert [int(round(f[0, 0, 0] * 100)) for f in (t.i0, t.i1, t.i2)] == [2, 3, 4]


def test_triplet_count_formula_exhaustive():
    for length in range(0, 51):
        clip = numbered_clip(length)
        for stride in range(1, 12):
            expected = (length - 3) // stride + 1 if length >= 3 else 0
            assert len(make_triplets(clip, stride)) == expected


def test_eval_clip_examples():
    (one,) = make_eval_clips(numbered_clip(9), 7)
    assert one.n == 7
    assert int(round(one.input_first[0, 0, 0] * 100)) == 0
    assert int(round(one.input_last[0, 0, 0] * 100)) == 8
    assert len(make_eval_clips(numbered_clip(18), 7)) == 2
    (mid,) = make_eval_clips(numbered_clip(3), 1)
    assert mid.n == 1 and int(round(mid.ground_truth[0][0, 0, 0] * 100)) == 1
    assert make_eval_clips(numbered_clip(5), 7) == []


def test_synthetic_is_deterministic():
    a = synthetic_motion_dataset(11, 2, 16, SMALL, length=3)
    b = synthetic_motion_dataset(11, 2, 16, SMALL, length=3)
    for ca, cb in zip(a, b):
        for fa, fb in zip(ca.frames, cb.frames):
            assert fa.tobytes() == fb.tobytes()
    c = synthetic_motion_dataset(12, 1, 16, SMALL, length=3)
    assert c[0].frames[0].tobytes() != a[0].frames[0].tobytes()


def test_zero_velocity_gives_static_clip():
    spec = MotionSpec(speed=(0.0, 0.0), n_shapes=12, n_blobs=3)
    (clip,) = synthetic_motion_dataset(0, 1, 16, spec, length=4)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)


def test_translation_matches_integer_shift_oracle():
    scene = SyntheticScene(np.random.default_rng(5), SMALL, (20, 24))
    scene.velocity = np.array([2.0, 1.0])
    f0, f2 = scene.render(0.0), scene.render(2.0)
    # moving by (4, 2) pixels: pixel (y, x) of frame 2 came from (y - 2, x - 4) of frame 0
    assert np.allclose(f2[2:, 4:], f0[:-2, :-4], atol=1e-6)
    half = scene.render(0.5)
    shifted = SyntheticScene.__new__(SyntheticScene)
    shifted.__dict__.update(scene.__dict__)
    shifted.velocity = np.array([1.0, 0.5])
    assert np.allclose(half, shifted.render(1.0), atol=1e-6)


def test_rendered_midpoint_matches_half_offset():
    clips = synthetic_motion_dataset(2, 2, 16, SMALL, length=3)
    evals = rendered_eval_clips(clips, n=1)
    assert len(evals) == 4
    for clip in clips:
        e = [x for x in evals if x.clip_id.startswith(clip.source_id)]
        assert np.array_equal(e[1].ground_truth[0], clip.scene.render(1.5))
        assert np.array_equal(e[0].input_first, clip.frames[0])
    with pytest.raises(ValueError):
        rendered_eval_clips([numbered_clip(3)])


def test_frame_values_in_range():
    (clip,) = synthetic_motion_dataset(3, 1, 16, MotionSpec(kind="mixed", n_shapes=10), length=2)
    for f in clip.frames:
        assert f.dtype == np.float32 and f.shape == (16, 16, 3)
        assert f.min() >= 0 and f.max() <= 1


def test_subsample_keeps_render_times():
    (clip,) = synthetic_motion_dataset(4, 1, 16, SMALL, length=9)
    sub = temporal_subsample(clip, 4)
    assert sub.times == [0.0, 4.0, 8.0]
    (e,) = rendered_eval_clips([sub], n=3)[:1]
    assert np.array_equal(e.ground_truth[0], clip.frames[1])


def test_save_load_round_trip(tmp_path):
    (clip,) = synthetic_motion_dataset(6, 1, 12, SMALL, length=3)
    paths = save_frames(clip, tmp_path / "clip")
    assert [p.name for p in paths] == ["000000.png", "000001.png", "000002.png"]
    back = load_frames(tmp_path / "clip")
    assert len(back) == 3
    for a, b in zip(clip.frames, back.frames):
        assert np.abs(a - b).max() <= 1 / 510 + 1e-7


def test_ingestion_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_frames(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(IngestionError):
        load_frames(tmp_path / "empty")
    mixed = tmp_path / "mixed"
    mixed.mkdir()
    Image.new("RGB", (4, 4)).save(mixed / "000000.png")
    Image.new("RGB", (5, 4)).save(mixed / "000001.png")
    with pytest.raises(IngestionError, match="inconsistent"):
        load_frames(mixed)
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "000000.png").write_bytes(b"garbage")
    with pytest.raises(IngestionError, match="unreadable"):
        load_frames(broken)
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "nope")


def test_load_dataset_layouts(tmp_path):
    clips = synthetic_motion_dataset(7, 2, 8, SMALL, length=3)
    for i, c in enumerate(clips):
        save_frames(c, tmp_path / "root" / f"clip{i}")
    assert [len(c) for c in load_dataset(tmp_path / "root")] == [3, 3]
    assert len(load_dataset(tmp_path / "root" / "clip1")) == 1
    manifest = tmp_path / "root" / "list.txt"
    manifest.write_text("# clips\nclip1\n\n")
    (only,) = load_dataset(manifest)
    assert only.source_id == "clip1"


def test_triplet_array_and_augmentation():
    clips = synthetic_motion_dataset(8, 2, 16, SMALL, length=4)
    arr = triplets_to_array([t for c in clips for t in make_triplets(c)])
    assert arr.shape == (4, 3, 16, 16, 3)
    out = random_crop_flip(arr, 8, True, np.random.default_rng(0))
    assert out.shape == (4, 3, 8, 8, 3)
    again = random_crop_flip(arr, 8, True, np.random.default_rng(0))
    assert np.array_equal(out, again)
    assert np.array_equal(random_crop_flip(arr, None, False, np.random.default_rng(0)), arr)
