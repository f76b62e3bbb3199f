import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melseq import evaluation, training
from melseq.autodiff import engine as ad
from melseq.errors import FormatError, InputError
from melseq.model import attention


def _ratings(tmp_path, text):
    path = tmp_path / "r.csv"
    path.write_text(text)
    return path


class TestMos:
    def test_constant(self):
        assert str(evaluation.mos([4, 4, 4])) == "4.000 ± 0.000"

    def test_two_ratings(self):
        s = evaluation.mos([3, 5])
        assert s.mean == 4.0 and s.std == pytest.approx(1.4142, abs=1e-4)
        assert s.halfwidth == pytest.approx(1.96)
        assert str(s) == "4.000 ± 1.960"

    def test_single_rating(self):
        s = evaluation.mos([2])
        assert s.mean == 2.0 and s.halfwidth == 0.0

    def test_empty(self):
        with pytest.raises(InputError):
            evaluation.mos([])

    def test_read_with_header(self, tmp_path):
        path = _ratings(tmp_path, "sample_id,rater_id,rating\na/1,r1,4\na/1,r2,5\nb/1,r1,3\n")
        rows = evaluation.read_ratings(path)
        assert rows == [("a/1", "r1", 4), ("a/1", "r2", 5), ("b/1", "r1", 3)]
        assert evaluation.group_by_set(rows) == {"a": [4, 5], "b": [3]}
        assert evaluation.mos_stats(path).mean == pytest.approx(4.0)

    @pytest.mark.parametrize(
        "body, lineno",
        [("s,r,6\n", 1), ("s,r,4\ns,r,5\n", 2), ("s,r,4\nt,r,x\n", 2), ("s,r\n", 1), ("s,r,0\n", 1)],
    )
    def test_row_errors_carry_line_number(self, tmp_path, body, lineno):
        with pytest.raises(evaluation.RatingError) as info:
            evaluation.read_ratings(_ratings(tmp_path, body))
        assert info.value.lineno == lineno and f"line {lineno}" in str(info.value)

    def test_no_set_prefix(self):
        assert evaluation.group_by_set([("x", "r", 3)]) == {"all": [3]}


class TestPgm:
    def test_uniform_is_white(self):
        assert np.all(evaluation.alignment_to_pixels(np.full((4, 6), 0.25)) == 255)

    def test_diagonal(self):
        px = evaluation.alignment_to_pixels(np.eye(5))
        np.testing.assert_array_equal(px, 255 * np.eye(5, dtype=np.uint8))

    def test_zero(self):
        assert not np.any(evaluation.alignment_to_pixels(np.zeros((2, 3))))

    @given(st.integers(0, 10000))
    def test_monotone(self, seed):
        A = np.random.default_rng(seed).random((6, 9))
        px = evaluation.alignment_to_pixels(A).ravel().astype(int)
        order = np.argsort(A.ravel())
        assert np.all(np.diff(px[order]) >= 0)

    def test_guided_mask_render(self):
        W = attention.guided_mask(100, 100)
        px = evaluation.alignment_to_pixels(W)
        assert np.all(np.diag(px) == 0)
        assert px[0, -1] == 255 and px[-1, 0] >= 250
        assert px[50, 52] < 20

    def test_round_trip_and_header(self, tmp_path):
        A = np.random.default_rng(0).random((3, 7))
        evaluation.render_alignment(A, tmp_path / "a.pgm")
        blob = (tmp_path / "a.pgm").read_bytes()
        assert blob.startswith(b"P5\n7 3\n255\n") and len(blob) == len(b"P5\n7 3\n255\n") + 21
        np.testing.assert_array_equal(evaluation.read_pgm(tmp_path / "a.pgm"), evaluation.alignment_to_pixels(A))

    def test_corrupt(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n2 2\n255\n\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            evaluation.read_pgm(tmp_path / "x.pgm")
        (tmp_path / "y.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(FormatError):
            evaluation.read_pgm(tmp_path / "y.pgm")


class TestThreshold:
    def test_constant_above(self):
        assert evaluation.steps_to_threshold([0.6] * 30) == 10

    def test_crossing(self):
        diags = [0.0] * 20 + [1.0] * 20
        # the trailing 10-step mean first reaches 0.5 once five ones are in the window
        assert evaluation.steps_to_threshold(diags) == 25

    def test_never_or_short(self):
        assert evaluation.steps_to_threshold([0.1] * 50) is None
        assert evaluation.steps_to_threshold([0.9] * 5) is None

    def test_report(self):
        r = evaluation.ExperimentReport(100, 20, 60, 0.5)
        assert r.ratio == 3.0 and not r.censored
        assert str(r).splitlines() == [
            "guided_steps_to_diag>=0.5: 20",
            "unguided_steps_to_diag>=0.5: 60",
            "ratio: 3.00",
        ]
        c = evaluation.ExperimentReport(100, 25, None, 0.5)
        assert c.censored and c.ratio == 4.0
        assert str(c).splitlines()[1:] == ["unguided_steps_to_diag>=0.5: >100", "ratio: >=4.00"]
        assert evaluation.ExperimentReport(100, None, None, 0.5).ratio is None


class TestAlignExperiment:
    def test_outputs(self, tiny_cfg, corpus, tmp_path):
        report = evaluation.align_experiment(tiny_cfg, corpus, 4, out_dir=tmp_path, snapshot_every=2)
        assert isinstance(report, evaluation.ExperimentReport) and report.steps == 4
        for arm in ("guided", "unguided"):
            names = {p.name for p in (tmp_path / arm).iterdir()}
            assert {"alignment_0000002.pgm", "alignment_0000004.pgm", "alignment_0000004.mspc"} <= names
        guided = (tmp_path / "guided" / "train.log").read_text().splitlines()
        unguided = (tmp_path / "unguided" / "train.log").read_text().splitlines()
        assert len(guided) == len(unguided) == 4
        assert all("attn=" in line for line in guided)
        assert all("attn=" not in line for line in unguided)
        assert (tmp_path / "report.txt").read_text().strip() == str(report)

    def test_parallel_matches_serial(self, tiny_cfg, corpus, tmp_path):
        a = evaluation.align_experiment(tiny_cfg, corpus, 3, out_dir=tmp_path / "a")
        b = evaluation.align_experiment(tiny_cfg, corpus, 3, out_dir=tmp_path / "b", parallel=True)
        assert str(a) == str(b)
        for arm in ("guided", "unguided"):
            assert (tmp_path / "a" / arm / "train.log").read_text() == (tmp_path / "b" / arm / "train.log").read_text()

    def test_parallel_error_propagates(self, tiny_cfg, tmp_path):
        with pytest.raises(InputError):
            evaluation.align_experiment(tiny_cfg, [], 2, parallel=True)


class TestGradcheckAudit:
    def test_single_seed_passes(self):
        worst = evaluation.gradcheck_components(0)
        assert {"gru_cell", "encoder", "attention", "softmax_rows"} <= set(worst)
        assert any(k.startswith("decode_loss:decoder.") for k in worst)
        assert max(worst.values()) < evaluation.GRADCHECK_TOL

    def test_corrupted_backward_detected(self, monkeypatch):
        def bad_tanh(x):
            y = np.tanh(x.data)
            return ad._make(y, (x,), lambda g: (g * (1.0 - y),))

        monkeypatch.setattr(ad, "tanh", bad_tanh)
        worst = evaluation.gradcheck_components(0, max_entries=5)
        assert worst["tanh"] > 1e-2 and worst["gru_cell"] > 1e-2
        assert worst["matmul"] < evaluation.GRADCHECK_TOL
