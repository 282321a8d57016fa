import pytest

from conftest import GRAD_CFG
from gradcheck import check, make_losses
from mpclab.numerics import backward


@pytest.mark.parametrize("which", ["mpc", "apc", "ctc", "attn", "joint"])
def test_every_weight_matches_finite_differences(grad_params, which):
    err, where = check(GRAD_CFG, grad_params, which)
    assert err < 1e-4, where


@pytest.mark.parametrize("which,untouched", [("mpc", ("decoder.", "ctc_head.")),
                                             ("apc", ("decoder.", "ctc_head.")),
                                             ("ctc", ("decoder.", "mpc_head.")),
                                             ("attn", ("ctc_head.", "mpc_head."))])
def test_unused_heads_get_zero_gradient(grad_params, which, untouched):
    grads = backward(make_losses(GRAD_CFG, grad_params)[which](), grad_params)
    for name, g in grads.items():
        if name.startswith(untouched):
            assert not g.any(), name
        elif name.startswith("prenet."):
            assert g.any(), name

