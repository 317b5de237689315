import pytest
import torch

from fdcheck import BLOCKS, block_cases, check_module, end_to_end_errors


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("block", BLOCKS)
def test_block_gradients(block, seed):
    module, inputs = block_cases(seed)[block]
    assert check_module(module, inputs, seed) <= 1e-4


def test_block_gradients_in_eval_mode():
    module, inputs = block_cases(7)["double_l_coa"]
    assert check_module(module.eval(), inputs, 7) <= 1e-4


def test_end_to_end_gradient():
    errors, _ = end_to_end_errors(seed=0)
    for block, errs in errors.items():
        assert len(errs) == 3, block
        assert max(errs) <= 1e-3, (block, errs)


def test_fd_helper_catches_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x

    class M(torch.nn.Module):
        def forward(self, x):
            return Wrong.apply(x)

    assert check_module(M(), [torch.randn(5, dtype=torch.float64) + 3]) > 0.1
