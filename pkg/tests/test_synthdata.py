import hashlib
import json

import numpy as np
import pytest

from sdl.errors import ConfigError, InvalidClass, SDLError
from sdl.synthdata import (
    BACKGROUND,
    CLASS_NAMES,
    HEADER,
    SynthConfig,
    boundary_flags_for,
    generate_dataset,
    load_batch,
    load_dataset,
    read_split,
    regenerate,
    render_sequence,
    sequence_spec,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(SynthConfig(), root)
    return load_dataset(root)


def test_confusable_pair_differs_only_on_stripes():
    cfg = SynthConfig()
    for a, b in ((0, 1), (2, 3)):
        cue = render_sequence(a, None, cfg, seed=11).video
        plain = render_sequence(b, None, cfg, seed=11).video
        diff = np.any(cue != plain, axis=(0, 2, 3))
        assert diff.any()
        assert not diff[: cfg.road_top].any()


def test_background_has_no_square():
    cfg = SynthConfig(noise=0.0)
    s = render_sequence(BACKGROUND, None, cfg, seed=3)
    assert np.all(s.video == s.video[0, 0, 0, 0])
    moving = render_sequence(1, None, cfg, seed=3).video
    assert moving.max() == pytest.approx(0.9)


def test_square_moves_in_class_direction():
    cfg = SynthConfig(noise=0.0)

    def centre(frame):
        ys, xs = np.nonzero(frame[..., 0] > 0.8)
        return ys.mean(), xs.mean()

    for cls, (dy, dx) in ((1, (0, -2)), (3, (0, 2)), (4, (1, 0))):
        v = render_sequence(cls, None, cfg, seed=5).video
        (y0, x0), (y1, x1) = centre(v[0]), centre(v[1])
        assert (y1 - y0, x1 - x0) == (dy, dx)


def test_switch_labels_and_boundary_flags():
    s = render_sequence((1, 4), 4, SynthConfig(), seed=0)
    assert s.frame_labels.tolist() == [1, 1, 1, 1, 4, 4, 4, 4]
    assert np.nonzero(s.boundary_flags)[0].tolist() == [3, 4, 5]
    flags = boundary_flags_for([0, 0, 2, 2, 2, 2, 2, 2])
    assert np.nonzero(flags)[0].tolist() == [1, 2, 3]


def test_boundary_flags_only_near_changes(dataset):
    for split in (dataset.train, dataset.test):
        for lab, flg in zip(split.labels, split.boundary):
            change = np.nonzero(lab[1:] != lab[:-1])[0] + 1
            near = np.zeros(len(lab), bool)
            for t in change:
                near[max(0, t - 1) : t + 2] = True
            np.testing.assert_array_equal(flg, near)


def test_invalid_inputs():
    with pytest.raises(InvalidClass):
        render_sequence(6, None, SynthConfig(), seed=0)
    with pytest.raises(ConfigError) as exc:
        SynthConfig(boundary_fraction=1.5)
    assert exc.value.field == "boundary_fraction"


def test_stratified_counts(dataset):
    assert len(dataset.train) == 600 and len(dataset.test) == 200
    for split in (dataset.train, dataset.test):
        counts = np.bincount(split.labels[:, 0], minlength=6)
        assert counts.max() - counts.min() <= 1
    man = dataset.manifest
    assert sum(man["splits"]["train"]["class_counts"].values()) == 600
    assert set(man["splits"]["test"]["class_counts"]) == set(CLASS_NAMES)


def test_boundary_fraction_roughly_respected(dataset):
    frac = dataset.train.boundary.any(axis=1).mean()
    assert 0.2 < frac < 0.4


def test_boundary_fraction_zero_sets_no_flags(tmp_path):
    generate_dataset(SynthConfig(n_train=30, n_test=12, boundary_fraction=0.0), tmp_path)
    ds = load_dataset(tmp_path)
    assert not ds.train.boundary.any() and not ds.test.boundary.any()


def test_regeneration_is_bit_identical(tmp_path, dataset):
    generate_dataset(SynthConfig(), tmp_path)
    for name in ("train.bin", "test.bin", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (dataset.root / name).read_bytes()


def test_single_sequence_regenerable(dataset):
    cfg = SynthConfig()
    for split, idx in (("train", 0), ("train", 457), ("test", 131)):
        s = regenerate(cfg, split, idx)
        stored = getattr(dataset, split)
        assert s.video.astype("<f4").tobytes() == stored.videos[idx].tobytes()
        np.testing.assert_array_equal(s.frame_labels, stored.labels[idx])
        _, _, seq_seed = sequence_spec(cfg, split, idx)
        assert seq_seed == cfg.seed ^ (idx + (cfg.n_train if split == "test" else 0))


def test_blob_layout(dataset):
    raw = (dataset.root / "test.bin").read_bytes()
    magic, T, H, W, C, count = HEADER.unpack_from(raw)
    assert (magic, T, H, W, C, count) == (b"SDL1", 8, 36, 36, 3, 200)
    rec = T * H * W * C * 4 + T * 2 + T
    assert len(raw) == HEADER.size + count * rec
    # second record's labels, read by hand
    off = HEADER.size + rec + T * H * W * C * 4
    labels = np.frombuffer(raw, "<u2", count=T, offset=off)
    np.testing.assert_array_equal(labels, dataset.test.labels[1])
    man = json.loads((dataset.root / "manifest.json").read_text())
    assert man["splits"]["test"]["sha256"] == hashlib.sha256(raw).hexdigest()


def test_corrupt_blob_rejected(tmp_path, dataset):
    raw = (dataset.root / "test.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-5])
    with pytest.raises(SDLError):
        read_split(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(SDLError):
        read_split(tmp_path / "magic.bin")


def test_load_batch_plain_is_center_crop_and_repeatable(dataset):
    a = load_batch(dataset.test, [0, 5, 9], augment=False, seed=1)
    b = load_batch(dataset.test, [0, 5, 9], augment=False, seed=2)
    assert a.videos.tobytes() == b.videos.tobytes()
    np.testing.assert_array_equal(a.videos[1], dataset.test.videos[5, :, 2:34, 2:34].astype(np.float64))


def test_load_batch_augment_bounds_and_determinism(dataset):
    idx = np.arange(0, 600, 7)
    a = load_batch(dataset.train, idx, augment=True, seed=3)
    b = load_batch(dataset.train, idx, augment=True, seed=3)
    assert a.videos.tobytes() == b.videos.tobytes()
    assert a.videos.shape == (len(idx), 8, 32, 32, 3)
    assert a.videos.min() >= 0.0 and a.videos.max() <= 1.0
    c = load_batch(dataset.train, idx, augment=True, seed=4)
    assert a.videos.tobytes() != c.videos.tobytes()
    # draws depend on (seed, index), not on batch composition
    single = load_batch(dataset.train, [idx[3]], augment=True, seed=3)
    assert single.videos[0].tobytes() == a.videos[3].tobytes()


def test_temporal_jitter_moves_labels_with_frames(dataset):
    checked = 0
    switch_idx = [i for i in range(len(dataset.train)) if dataset.train.boundary[i].any()]
    cfg = SynthConfig()
    for seed in range(6):
        batch = load_batch(dataset.train, switch_idx[:20], augment=True, seed=seed)
        for k, i in enumerate(batch.indices):
            (a, b), switch, _ = sequence_spec(cfg, "train", int(i))
            v = batch.videos[k]
            # edge clamping duplicates the first or last frame
            if np.array_equal(v[0], v[1]):
                shift = -1
            elif np.array_equal(v[-1], v[-2]):
                shift = 1
            else:
                shift = 0
            src = np.clip(np.arange(8) + shift, 0, 7)
            expected = np.where(src < switch, a, b)
            np.testing.assert_array_equal(batch.labels[k], expected)
            checked += 1
    assert checked == 120


def test_load_batch_bad_index(dataset):
    with pytest.raises(IndexError):
        load_batch(dataset.test, [200], augment=False, seed=0)
