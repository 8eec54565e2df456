import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from dexpression import frameselect as F
from oracles import replay_oracle


def test_replay_oracle_on_thousand_random_vectors():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n = int(rng.integers(20, 201))
        if trial % 3 == 0:
            d = rng.integers(0, 4, n).astype(float)  # heavy ties
        else:
            d = rng.uniform(0, 1, n)
        assert F.select_from_scores(d, 20) == replay_oracle(d, 20), trial


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.integers(5, 80), elements=st.floats(0, 10)), st.integers(1, 5))
def test_selection_properties(d, count):
    sel = F.select_from_scores(d, count)
    assert len(sel) == count
    assert sel == sorted(set(sel))
    assert all(1 <= t <= len(d) for t in sel)
    assert sel == replay_oracle(d, count)


def test_strictly_increasing():
    d = np.arange(1, 21, dtype=float)
    assert F.select_from_scores(d, 20) == list(range(1, 21))


def test_well_separated_spikes():
    d = np.zeros(200)
    spikes = list(range(5, 200, 10))
    d[spikes] = np.linspace(1, 2, 20)
    assert F.select_from_scores(d, 20) == [t + 1 for t in spikes]
    assert F.select_from_scores(d, 20) == replay_oracle(d, 20)


def test_adjacent_spikes_share_a_window():
    d = np.zeros(40)
    d[10], d[11] = 5.0, 4.0
    d[30] = 3.0
    # at the widest filter only the larger of the pair survives
    assert F.windowed_maxima(d, 41).tolist() == [10]
    assert 11 not in F.windowed_maxima(d, 20).tolist()
    assert F.select_from_scores(d, 2) == [11, 31]
    # the smaller neighbour is shadowed by every filter wider than one position
    for w in F.window_schedule(41)[:-1]:
        assert 11 not in F.windowed_maxima(d, w).tolist()
    assert 11 in F.windowed_maxima(d, 1).tolist()
    assert 12 not in F.select_from_scores(d, 3)
    assert 12 in F.select_from_scores(d, 40)
    assert F.select_from_scores(d, 3) == replay_oracle(d, 3)


def test_window_schedule():
    assert F.window_schedule(30) == [30, 15, 7, 3, 1]
    assert F.window_schedule(21) == [21, 10, 5, 3, 1]
    assert F.window_schedule(4) == [4, 3, 1]


def test_too_few_scores():
    with pytest.raises(F.TooFewFramesError):
        F.select_from_scores(np.ones(19), 20)


# ------------------------------------------------------------ smoothing and differences

def test_gaussian_constant_unchanged():
    img = np.full((1, 9, 11), 0.3)
    assert np.abs(F.gaussian_smooth(img, 1.5) - 0.3).max() <= 1e-6


def test_gaussian_impulse_is_kernel():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    out = F.gaussian_smooth(img, 1.0)
    k = F.gaussian_kernel(1.0)
    assert len(k) == 7 and abs(k.sum() - 1) < 1e-12
    np.testing.assert_allclose(out[4:11, 4:11], np.outer(k, k), atol=1e-12)
    assert abs(out.sum() - 1) <= 1e-4


def test_gaussian_rejects_sigma():
    with pytest.raises(ValueError):
        F.gaussian_kernel(0)


def test_differences():
    a = np.zeros((1, 6, 6))
    b = np.full((1, 6, 6), 0.5)
    assert F.frame_differences([a, a]).tolist() == [0.0]
    assert F.frame_differences([a, b])[0] == pytest.approx(0.5)
    with pytest.raises(F.FrameSizeMismatchError):
        F.frame_differences([a, np.zeros((1, 5, 6))])
    with pytest.raises(F.TooFewFramesError):
        F.frame_differences([a])


def test_differences_duplicate_last_frame(rng):
    frames = [rng.uniform(0, 1, (1, 8, 8)) for _ in range(5)]
    d = F.frame_differences(frames)
    d2 = F.frame_differences(frames + [frames[-1].copy()])
    assert np.array_equal(d2[:-1], d) and d2[-1] == 0


# ------------------------------------------------------------ extraction

def synthetic_session(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, (1, size, size))
    frames = []
    for i in range(n):
        f = base + 0.02 * i * rng.uniform(-1, 1, base.shape)
        frames.append(np.clip(f, 0, 1).astype(np.float32))
    return F.FrameSequence(frames, "s1")


@pytest.mark.parametrize("n", [21, 30, 57])
def test_extraction_yields_eighteen(n):
    ex = F.extract_mmi_style(synthetic_session(n))
    assert len(ex.selected) == 20
    assert ex.discarded == ex.selected[:2]
    assert len(ex.kept) == len(ex.images) == 18
    for img in ex.images:
        assert img.shape == (1, 224, 224)
        assert img.min() >= 0 and img.max() <= 1


def test_extraction_returns_original_frames():
    seq = synthetic_session(25, size=224)
    ex = F.extract_mmi_style(seq)
    for t, img in zip(ex.kept, ex.images):
        assert np.array_equal(img, seq.frames[t])


def test_extraction_too_short():
    with pytest.raises(F.TooFewFramesError):
        F.extract_mmi_style(synthetic_session(20))


def test_load_frame_sequence_natural_order(tmp_path):
    for i in (10, 2, 1):
        Image.new("L", (4, 4), i * 10).save(tmp_path / f"frame{i}.png")
    seq = F.load_frame_sequence(tmp_path)
    assert seq.frame_ids == ["frame1.png", "frame2.png", "frame10.png"]
    assert seq.session == tmp_path.name


def test_sequence_size_mismatch():
    with pytest.raises(F.FrameSizeMismatchError):
        F.FrameSequence([np.zeros((1, 4, 4)), np.zeros((1, 4, 5))])


def test_manifest(tmp_path):
    ex = F.extract_mmi_style(synthetic_session(22))
    F.write_manifest(tmp_path / "m.csv", [ex], 1.0, 20)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "session,selected,discarded,sigma,count"
    assert lines[1].startswith("s1,")
