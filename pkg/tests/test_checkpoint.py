import numpy as np
import pytest

from daspl.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from daspl.dataset import FACTOR_DIM, LABEL_NAMES, build_vocabulary, to_model_inputs
from daspl.errors import CheckpointError
from daspl.model import DasplModel


@pytest.fixture
def trained(toy_run_cfg, samples):
    vocab = build_vocabulary(samples)
    model = DasplModel(toy_run_cfg.model, len(vocab), LABEL_NAMES, FACTOR_DIM, seed=4)
    inputs = [to_model_inputs(s, vocab, 16) for s in samples]
    # one forward to give the tracker a dual-weight state
    model.tracker.advance(model.forward(inputs[:2]).head_outputs)
    return model, vocab, inputs


class TestRoundTrip:
    def test_forward_is_bit_identical(self, tmp_path, toy_run_cfg, trained):
        model, vocab, inputs = trained
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, model, vocab, toy_run_cfg)
        loaded = load_checkpoint(path)
        assert loaded.vocab.tokens == vocab.tokens
        assert loaded.config == toy_run_cfg
        before = model.forward(inputs[:1], training=False).samples[0]
        after = loaded.model.forward(inputs[:1], training=False).samples[0]
        assert before.p2.data.tobytes() == after.p2.data.tobytes()
        assert before.label.data.tobytes() == after.label.data.tobytes()

    def test_generation_survives(self, tmp_path, toy_run_cfg, trained):
        model, vocab, inputs = trained
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, model, vocab, toy_run_cfg)
        loaded = load_checkpoint(path).model
        assert loaded.generate(inputs[0], 2, 8) == model.generate(inputs[0], 2, 8)

    def test_sections(self, tmp_path):
        path = str(tmp_path / "raw.ckpt")
        arrays = [("w", np.arange(6.0).reshape(2, 3)), ("s", np.array(2.5))]
        write_checkpoint(path, {"k": 1}, arrays)
        meta, sections = read_checkpoint(path)
        assert meta == {"k": 1}
        np.testing.assert_array_equal(sections["w"], arrays[0][1])
        assert sections["s"].shape == () and float(sections["s"]) == 2.5


class TestCorruption:
    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            read_checkpoint(str(tmp_path / "absent.ckpt"))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="not a DA-SPL checkpoint"):
            read_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "cut.ckpt"
        write_checkpoint(str(path), {}, [("w", np.ones((4, 4)))])
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(str(path))

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        path.write_bytes(MAGIC + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(CheckpointError, match="version 9"):
            read_checkpoint(str(path))
