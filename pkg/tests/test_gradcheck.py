import pytest

from daspl import autodiff
from daspl.autodiff import OpRule
from daspl.gradcheck import BLOCKS, TOLERANCE, run_gradcheck


class TestGradcheck:
    def test_every_block_passes(self):
        results = run_gradcheck(seed=0)
        assert [r.name for r in results] == list(BLOCKS)
        for r in results:
            assert r.passed, f"{r.name}: {r.error:.2e}"
            assert r.error < TOLERANCE

    def test_named_subset(self):
        results = run_gradcheck(seed=1, names=["composite_loss"])
        assert [r.name for r in results] == ["composite_loss"]

    def test_broken_backward_rule_is_caught(self, monkeypatch):
        original = autodiff._OPS["tanh"]
        # drop the squared term of d tanh
        broken = OpRule(original.forward, lambda grad, node, out: (grad * (1.0 - out),))
        monkeypatch.setitem(autodiff._OPS, "tanh", broken)
        results = {r.name: r for r in run_gradcheck(seed=0)}
        assert not results["decoder"].passed
        assert not results["label_module"].passed
        assert results["composite_loss"].passed

    def test_identity_tanh_backward_fails_label_block(self, monkeypatch):
        original = autodiff._OPS["tanh"]
        monkeypatch.setitem(autodiff._OPS, "tanh", OpRule(original.forward, lambda grad, node, out: (grad,)))
        (result,) = run_gradcheck(seed=0, names=["label_module"])
        assert not result.passed
        assert result.error > 10 * TOLERANCE

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_label_block_passes_for_several_seeds(self, seed):
        (result,) = run_gradcheck(seed=seed, names=["label_module"])
        assert result.passed, f"{result.error:.2e}"
