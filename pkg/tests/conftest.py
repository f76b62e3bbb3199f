import numpy as np
import pytest

from melseq import data, training


def make_utt(uid, n_chars, n_frames, seed=0, n_mels=80, n_bins=513):
    rng = np.random.default_rng(seed)
    ids = list(rng.integers(2, 28, n_chars - 1)) + [data.DEFAULT_VOCAB.eos_id]
    mel = rng.random((n_frames, n_mels)).astype(np.float32)
    lin = rng.random((n_frames, n_bins)).astype(np.float32)
    return data.Utterance(uid, "x", ids, mel, lin)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    return data.write_synthetic_corpus(tmp_path_factory.mktemp("syn"), n_utts=12, seed=0)


@pytest.fixture(scope="session")
def corpus(synthetic_dir, tmp_path_factory):
    return data.load_corpus(synthetic_dir, cache_dir=tmp_path_factory.mktemp("cache"))


@pytest.fixture(scope="session")
def tiny_cfg():
    return training.TrainConfig(
        d=16, prenet_dim=16, postnet_dim=16, batch_size=4, lr=1e-3, max_steps=6, checkpoint_every=0, dtype="float64"
    )


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_cfg, corpus):
    trainer = training.Trainer(tiny_cfg, corpus)
    trainer.run(4)
    return trainer.checkpoint()


@pytest.fixture(scope="session")
def ckpt_path(tiny_ckpt, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.msqk"
    training.save_checkpoint(path, tiny_ckpt)
    return path


# -- acceptance reporting --------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail, extra_lines)`` for the end-of-run acceptance table."""

    def record(number, passed, detail, extra=()):
        _CRITERIA[number] = (bool(passed), detail, list(extra))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=lambda k: (int(str(k).split("-")[0]), str(k))):
        passed, detail, extra = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {str(number):>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        for line in extra:
            terminalreporter.write_line(f"    {line}")
