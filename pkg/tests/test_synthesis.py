import dataclasses

import numpy as np
import pytest

from melseq import synthesis
from melseq.autodiff import Tensor
from melseq.errors import EmptyTextError, InputError, VersionError

FAST = synthesis.SynthesisOptions(max_steps=30, griffin_lim_iters=4)
NO_AUDIO = dataclasses.replace(FAST, render_audio=False)


def _with_stop_bias(ckpt, bias):
    params = ckpt.params.copy()
    params["decoder.stop.b"] = Tensor(np.array([bias]))
    return dataclasses.replace(ckpt, params=params)


class TestSynthesize:
    def test_immediate_stop(self, tiny_ckpt):
        res = synthesis.synthesize("abc", _with_stop_bias(tiny_ckpt, 50.0), FAST)
        assert res.n_steps == 1 and res.stop_step == 1 and not res.hit_max_steps
        assert res.mel.shape == (5, 80) and res.linear.shape == (5, 513)
        assert res.waveform.samples.size > 0

    def test_max_steps_flagged(self, tiny_ckpt):
        res = synthesis.synthesize("abc", _with_stop_bias(tiny_ckpt, -50.0), NO_AUDIO)
        assert res.hit_max_steps and res.stop_step is None
        assert res.n_steps == 30 and res.mel.shape[0] == 150
        assert res.waveform is None

    def test_forced_positions_incremental(self, tiny_ckpt):
        ckpt = _with_stop_bias(tiny_ckpt, -50.0)
        res = synthesis.synthesize("abc defg hijk abc defg", ckpt, NO_AUDIO)
        steps = np.diff(np.concatenate([[0], res.positions]))
        assert np.all((steps >= 0) & (steps <= 3))
        np.testing.assert_allclose(res.alignment.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(res.alignment >= 0)

    def test_unforced_is_raw_rollout(self, tiny_ckpt):
        ckpt = _with_stop_bias(tiny_ckpt, -50.0)
        opts = dataclasses.replace(NO_AUDIO, forced_incremental=False)
        res = synthesis.synthesize("abc defg hijk abc defg", ckpt, opts)
        np.testing.assert_array_equal(res.positions, np.argmax(res.alignment, axis=0))
        forced = synthesis.synthesize("abc defg hijk abc defg", ckpt, NO_AUDIO)
        # an untrained model's attention wanders, so forcing changes what gets generated
        assert not np.array_equal(res.mel, forced.mel)

    def test_deterministic(self, tiny_ckpt):
        a = synthesis.synthesize("a b c", tiny_ckpt, FAST)
        b = synthesis.synthesize("a b c", tiny_ckpt, FAST)
        assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()

    def test_frames_multiple_of_r(self, tiny_ckpt):
        res = synthesis.synthesize("hello", tiny_ckpt, NO_AUDIO)
        assert res.mel.shape[0] == res.linear.shape[0] == 5 * res.n_steps

    def test_text_errors(self, tiny_ckpt):
        with pytest.raises(InputError):
            synthesis.synthesize("   ", tiny_ckpt, FAST)
        with pytest.raises(EmptyTextError):
            synthesis.synthesize("ééé", tiny_ckpt, FAST)
        with pytest.raises(InputError):
            synthesis.synthesize("abc", tiny_ckpt, dataclasses.replace(FAST, max_steps=0))

    def test_incompatible_checkpoint(self, tiny_ckpt):
        params = tiny_ckpt.params.copy()
        params["decoder.stop.W"] = Tensor(np.zeros((1, 3)))
        with pytest.raises(VersionError):
            synthesis.synthesize("abc", dataclasses.replace(tiny_ckpt, params=params), FAST)
        with pytest.raises(VersionError):
            synthesis.synthesize("abc", dataclasses.replace(tiny_ckpt, vocab=tiny_ckpt.vocab[:-1]), FAST)


class TestBatchSynthesize:
    def test_single_matches(self, tiny_ckpt):
        [a] = synthesis.batch_synthesize(["abc"], tiny_ckpt, NO_AUDIO)
        b = synthesis.synthesize("abc", tiny_ckpt, NO_AUDIO)
        np.testing.assert_array_equal(a.mel, b.mel)

    def test_errors_collected(self, tiny_ckpt):
        out = synthesis.batch_synthesize(["abc", "", "de"], tiny_ckpt, NO_AUDIO)
        assert isinstance(out[0], synthesis.SynthesisResult) and isinstance(out[2], synthesis.SynthesisResult)
        assert isinstance(out[1], synthesis.SynthesisFailure) and out[1].index == 1
        assert isinstance(out[1].error, InputError)

    def test_parallel_equals_serial(self, tiny_ckpt):
        texts = [f"{'ab ' * (i + 1)}c" for i in range(10)]
        serial = synthesis.batch_synthesize(texts, tiny_ckpt, NO_AUDIO)
        parallel = synthesis.batch_synthesize(texts, tiny_ckpt, NO_AUDIO, workers=4)
        for s, p in zip(serial, parallel):
            assert s.mel.tobytes() == p.mel.tobytes()
            np.testing.assert_array_equal(s.alignment, p.alignment)
