import numpy as np
import pytest

from busvid import synthgen, ticselect
from busvid.errors import NoEnhancementError, ParameterError, ShapeError
from busvid.video import BimodalVideo
from conftest import small_case


def make_video(ceus):
    ceus = np.asarray(ceus, dtype=np.uint8)
    return BimodalVideo(gsus=np.zeros_like(ceus), ceus=ceus)


class TestMeanTic:
    def test_all_zero(self):
        tic = ticselect.compute_mean_tic(np.zeros((4, 8, 8)))
        assert np.all(tic.values == 0.0)

    def test_constant_frame(self):
        tic = ticselect.compute_mean_tic(np.full((3, 5, 7), 100.0))
        assert np.all(tic.values == 100.0)

    def test_empty_video_rejected(self):
        with pytest.raises(ShapeError):
            ticselect.compute_mean_tic(np.zeros((0, 4, 4)))

    def test_matches_synthetic_oracle(self):
        spec, video, _ = small_case(seed=31)
        tic = ticselect.compute_mean_tic(video.ceus)
        analytic = synthgen.analytic_mean_tic(spec)
        assert np.abs(tic.values - analytic.values).max() < 0.5


def brute_force_savgol(values, window, order):
    """Independent oracle: explicit least-squares fit per sliding window,
    edge positions evaluated on the first/last window's polynomial."""
    n = len(values)
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        lo = min(max(i - half, 0), n - window)
        t = np.arange(lo, lo + window, dtype=float)
        coeffs = np.polyfit(t, values[lo:lo + window], order)
        out[i] = np.polyval(coeffs, float(i))
    return out


class TestSavitzkyGolay:
    def test_reproduces_polynomials(self):
        t = np.arange(64, dtype=float)
        poly = 3.0 + 0.5 * t + 0.02 * t * t
        sm = ticselect.sg_smooth(ticselect.TimeIntensityCurve(poly), 31, 2)
        assert np.abs(sm.values - poly).max() < 1e-9

    def test_constant_unchanged(self):
        const = np.full(40, 7.0)
        sm = ticselect.sg_smooth(ticselect.TimeIntensityCurve(const), 31, 2)
        assert np.abs(sm.values - 7.0).max() < 1e-9

    def test_matches_brute_force_windows(self):
        rng = np.random.default_rng(0)
        values = np.cumsum(rng.normal(size=120)) + 50.0
        sm = ticselect.sg_smooth(ticselect.TimeIntensityCurve(values), 31, 2)
        assert np.abs(sm.values - brute_force_savgol(values, 31, 2)).max() < 1e-8

    def test_noise_reduction_on_ramp(self):
        rng = np.random.default_rng(1)
        t = np.arange(200, dtype=float)
        clean = t.copy()
        noisy = clean + rng.normal(0.0, 5.0, 200)
        sm = ticselect.sg_smooth(ticselect.TimeIntensityCurve(noisy), 31, 2)
        interior = slice(15, 185)
        assert np.abs(sm.values[interior] - clean[interior]).max() \
            < np.abs(noisy[interior] - clean[interior]).max()

    def test_parameter_errors(self):
        curve = ticselect.TimeIntensityCurve(np.zeros(40))
        with pytest.raises(ParameterError):
            ticselect.sg_smooth(curve, window=30, order=2)
        with pytest.raises(ParameterError):
            ticselect.sg_smooth(curve, window=5, order=5)
        with pytest.raises(ParameterError):
            ticselect.sg_smooth(ticselect.TimeIntensityCurve(np.zeros(10)), 31, 2)


class TestFindTtsTtp:
    def test_constant_curve_never_enhances(self):
        with pytest.raises(NoEnhancementError):
            ticselect.find_tts_ttp(ticselect.TimeIntensityCurve(np.full(10, 3.0)), 0.5)

    def test_hand_worked_example(self):
        curve = ticselect.TimeIntensityCurve([0, 0, 0, 1, 2, 3, 3, 3])
        tts, ttp = ticselect.find_tts_ttp(curve, threshold=0.5)
        assert (tts, ttp) == (2, 5)

    def test_first_peak_on_ties(self):
        curve = ticselect.TimeIntensityCurve([0, 0, 5, 9, 9, 9, 2, 9])
        tts, ttp = ticselect.find_tts_ttp(curve, threshold=1.0)
        assert ttp == 3

    def test_synthetic_recovery(self):
        spec, video, truth = small_case(seed=33)
        sm = ticselect.sg_smooth(ticselect.compute_mean_tic(video.ceus))
        tts, ttp = ticselect.find_tts_ttp(sm)
        assert abs(tts - truth.tts) <= 2
        assert abs(ttp - truth.ttp) <= 2

    def test_scale_equivariance(self):
        rng = np.random.default_rng(5)
        base = np.concatenate([np.full(20, 10.0),
                               10.0 + np.cumsum(rng.uniform(0.3, 1.0, 30))])
        scale = 3.7
        tts1, ttp1 = ticselect.find_tts_ttp(ticselect.TimeIntensityCurve(base), 0.4)
        tts2, ttp2 = ticselect.find_tts_ttp(
            ticselect.TimeIntensityCurve(base * scale), 0.4 * scale)
        assert (tts1, ttp1) == (tts2, ttp2)


class TestSelectFrames:
    def make(self, n):
        frames = np.arange(n, dtype=np.uint8)[:, None, None] * np.ones((1, 4, 4), np.uint8)
        return make_video(frames)

    def test_step_one_full_span(self):
        video = self.make(64)
        clip, sel = ticselect.select_frames(video, 0, 31, frames=32)
        assert sel.step == 1
        assert sel.indices.tolist() == list(range(32))
        assert clip.frame_count == 32

    def test_degenerate_point_clip(self):
        video = self.make(64)
        clip, sel = ticselect.select_frames(video, 10, 10, frames=32)
        assert sel.step == 1
        assert sel.indices.tolist() == list(range(10, 42))

    def test_step_three(self):
        video = self.make(128)
        clip, sel = ticselect.select_frames(video, 0, 95, frames=32)
        assert sel.step == 3
        assert sel.indices.tolist() == list(range(0, 96, 3))

    def test_clamping_beyond_raw_length(self):
        video = self.make(40)
        clip, sel = ticselect.select_frames(video, 10, 10, frames=32)
        # arithmetic indices run to 41; gathered frames clamp to the last frame
        assert sel.indices.tolist() == list(range(10, 42))
        assert clip.ceus[-1, 0, 0] == 39
        assert clip.frame_count == 32

    def test_exact_budget_for_random_inputs(self):
        rng = np.random.default_rng(7)
        video = self.make(200)
        for _ in range(50):
            tts = int(rng.integers(0, 150))
            ttp = int(rng.integers(tts, 199))
            clip, sel = ticselect.select_frames(video, tts, ttp, frames=32)
            assert clip.frame_count == 32
            diffs = np.diff(sel.indices)
            assert sel.indices[0] == tts
            assert np.all(diffs == diffs[0]) and diffs[0] >= 1

    def test_errors(self):
        video = self.make(10)
        with pytest.raises(ParameterError):
            ticselect.select_frames(video, 0, 5, frames=0)
        with pytest.raises(ParameterError):
            ticselect.select_frames(video, 5, 2, frames=8)
        with pytest.raises(ParameterError):
            ticselect.select_frames(video, 0, 10, frames=8)


class TestSelectClip:
    def test_fallback_on_static_video(self):
        video = make_video(np.full((64, 8, 8), 20, np.uint8))
        clip, sel = ticselect.select_clip(video, window=31, order=2, frames=16)
        assert sel.fallback
        assert clip.frame_count == 16

    def test_selected_clip_starts_at_tts(self):
        spec, video, truth = small_case(seed=35)
        clip, sel = ticselect.select_clip(video)
        assert not sel.fallback
        assert abs(sel.tts - truth.tts) <= 2
        assert clip.frame_count == 32
