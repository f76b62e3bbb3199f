import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melseq import audio, data
from melseq.errors import CorpusError, EmptyTextError, InputError, VocabError

from conftest import make_utt

V = data.DEFAULT_VOCAB


class TestVocab:
    def test_pad_is_zero_and_bijective(self):
        assert V.symbols[0] == data.PAD and V.pad_id == 0
        assert len(V.index) == len(V.symbols) == len(V)
        assert all(V.index[s] == i for i, s in enumerate(V.symbols))

    def test_encode_ab(self):
        ids = data.encode_text("ab")
        assert ids == [V.index["a"], V.index["b"], V.eos_id]
        assert len(ids) == 3

    def test_encode_empty_is_eos(self):
        assert data.encode_text("") == [V.eos_id]

    def test_unknown_char(self):
        with pytest.raises(VocabError):
            V.encode("é")

    def test_reserved_symbols_rejected(self):
        with pytest.raises(VocabError):
            V.encode("a~b")

    @given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789 !'\"(),-.:;?", max_size=40))
    def test_round_trip(self, s):
        assert V.decode(V.encode(s)) == s

    def test_bad_vocab(self):
        with pytest.raises(ValueError):
            data.CharVocab(["a", data.PAD, data.EOS])
        with pytest.raises(ValueError):
            data.CharVocab([data.PAD, data.EOS, "a", "a"])


class TestNormalize:
    @pytest.mark.parametrize(
        "raw, expected",
        [
            ("Hello,  World!", "hello, world!"),
            ("Café", "caf"),
            ("A\u2014B", "a-b"),
            ("“Quoted” ‘single’", "\"quoted\" 'single'"),
            ("  tabs\tand\nnewlines  ", "tabs and newlines"),
        ],
    )
    def test_examples(self, raw, expected):
        assert data.normalize_text(raw) == expected

    def test_empty_after_normalization(self):
        with pytest.raises(EmptyTextError):
            data.normalize_text("ÉÉ  ")

    @given(st.text(max_size=60))
    def test_output_is_encodable(self, s):
        try:
            norm = data.normalize_text(s)
        except EmptyTextError:
            return
        assert norm == norm.strip() and "  " not in norm
        V.encode(norm)


class TestMetadata:
    def test_prefers_normalized_column(self, tmp_path):
        (tmp_path / "metadata.csv").write_text("LJ001-0001|text a|text b\nLJ001-0002|only raw\n")
        assert data.load_metadata(tmp_path) == [("LJ001-0001", "text b"), ("LJ001-0002", "only raw")]

    def test_malformed_lines_skipped_with_warning(self, tmp_path, caplog):
        (tmp_path / "metadata.csv").write_text("ok|a|a\nbroken\n|no id|x\n")
        with caplog.at_level(logging.WARNING, logger="melseq.data"):
            rows = data.load_metadata(tmp_path)
        assert rows == [("ok", "a")]
        assert "skipped 2 malformed" in caplog.text

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_metadata(tmp_path)
        (tmp_path / "metadata.csv").write_text("junk\n\n")
        with pytest.raises(CorpusError):
            data.load_metadata(tmp_path)


class TestMakeBatch:
    def test_single_t7(self):
        b = data.make_batch([make_utt("a", 4, 7)])
        assert b.mel_targets.shape == (1, 10, 80)
        assert b.linear_targets.shape == (1, 10, 513)
        assert b.n_steps == 2
        np.testing.assert_array_equal(b.stop_targets, [[0, 1]])
        np.testing.assert_array_equal(b.step_lengths, [2])

    def test_t5_and_t10(self):
        b = data.make_batch([make_utt("a", 3, 5, seed=1), make_utt("b", 6, 10, seed=2)])
        assert b.mel_targets.shape[1] == 10
        np.testing.assert_array_equal(b.frame_mask[0], [True] * 5 + [False] * 5)
        assert b.frame_mask[1].all()
        assert not np.any(b.mel_targets[0, 5:]) and not np.any(b.linear_targets[0, 5:])
        np.testing.assert_array_equal(b.stop_targets, [[1, 1], [0, 1]])
        np.testing.assert_array_equal(b.char_mask[0], [True] * 3 + [False] * 3)
        assert np.all(b.char_ids[0, 3:] == 0)

    def test_identical_items_have_full_masks(self):
        u = make_utt("a", 5, 15)
        b = data.make_batch([u, u, u])
        assert b.frame_mask.all() and b.char_mask.all() and b.step_mask.all()

    @given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 33)), min_size=1, max_size=5))
    def test_invariants(self, dims):
        utts = [make_utt(str(i), n, t, seed=i) for i, (n, t) in enumerate(dims)]
        b = data.make_batch(utts)
        assert b.mel_targets.shape[1] % 5 == 0
        np.testing.assert_array_equal(b.frame_mask.sum(axis=1), b.frame_lengths)
        np.testing.assert_array_equal(b.char_mask.sum(axis=1), b.char_lengths)
        assert not np.any(b.mel_targets[~b.frame_mask])
        for i, (_, t) in enumerate(dims):
            row = b.stop_targets[i]
            first = int(np.argmax(row))
            assert first == -(-t // 5) - 1
            assert np.all(row[:first] == 0) and np.all(row[first:] == 1)

    def test_errors(self):
        with pytest.raises(InputError):
            data.make_batch([])
        u = make_utt("a", 3, 1)
        u.mel, u.linear = u.mel[:0], u.linear[:0]
        with pytest.raises(InputError):
            data.make_batch([u])

    def test_utterance_invariants(self):
        with pytest.raises(InputError):
            data.Utterance("x", "", [], np.zeros((2, 80)), np.zeros((2, 513)))
        with pytest.raises(InputError):
            data.Utterance("x", "a", [3, 1], np.zeros((2, 80)), np.zeros((3, 513)))


class TestCorpus:
    def test_loads_all_utterances(self, corpus, synthetic_dir):
        assert len(corpus) == 12
        u = corpus[0]
        assert u.mel.shape[1] == 80 and u.linear.shape[1] == 513
        assert u.mel.shape[0] == u.linear.shape[0]
        assert u.char_ids[-1] == V.eos_id

    def test_cache_layout_and_reuse(self, synthetic_dir, tmp_path):
        first = data.load_corpus(synthetic_dir, cache_dir=tmp_path, max_utts=2)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert f"{first[0].id}.mel.mspc" in names and f"{first[0].id}.lin.mspc" in names
        again = data.load_corpus(synthetic_dir, cache_dir=tmp_path, max_utts=2)
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a.mel, b.mel)
            np.testing.assert_array_equal(a.linear, b.linear)

    def test_cache_is_bit_identical_to_fresh(self, synthetic_dir, tmp_path):
        a = data.load_corpus(synthetic_dir, cache_dir=tmp_path / "a", max_utts=3)
        b = data.load_corpus(synthetic_dir, cache_dir=tmp_path / "b", max_utts=3, workers=3)
        for x, y in zip(a, b):
            assert x.mel.tobytes() == y.mel.tobytes()

    def test_stale_cache_entry_recomputed(self, synthetic_dir, tmp_path):
        u = data.load_corpus(synthetic_dir, cache_dir=tmp_path, max_utts=1)[0]
        audio.write_mspc(tmp_path / f"{u.id}.mel.mspc", np.zeros((3, 80)))
        (tmp_path / f"{u.id}.key").write_text("stale\n")
        again = data.load_corpus(synthetic_dir, cache_dir=tmp_path, max_utts=1)[0]
        np.testing.assert_array_equal(again.mel, u.mel)

    def test_env_var_sets_cache(self, synthetic_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("MELSEQ_CACHE", str(tmp_path / "envcache"))
        assert data.default_cache_dir(synthetic_dir) == tmp_path / "envcache"
        data.load_corpus(synthetic_dir, max_utts=1)
        assert any((tmp_path / "envcache").glob("*.mel.mspc"))
        monkeypatch.delenv("MELSEQ_CACHE")
        assert data.default_cache_dir(synthetic_dir) == synthetic_dir / ".melseq_cache"

    def test_max_utts_keeps_shortest(self, synthetic_dir, tmp_path):
        sub = data.load_corpus(synthetic_dir, cache_dir=tmp_path, max_utts=4)
        full = data.load_corpus(synthetic_dir, cache_dir=tmp_path)
        cutoff = sorted(u.n_frames for u in full)[3]
        assert len(sub) == 4 and all(u.n_frames <= cutoff for u in sub)

    def test_missing_audio_skipped(self, tmp_path):
        data.write_synthetic_corpus(tmp_path, n_utts=3)
        (tmp_path / "wavs" / "SYN0001.wav").unlink()
        got = data.load_corpus(tmp_path, cache_dir=tmp_path / "c")
        assert [u.id for u in got] == ["SYN0000", "SYN0002"]

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_corpus(tmp_path / "nope")
