import pytest
import torch

from vibertgrid.gradcheck import check, crf_probe, encoder_probe, relative_error


class WrongSquare(torch.autograd.Function):
    """x**2 with a backward that is off by 10%."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.2 * x


def test_check_flags_wrong_gradient():
    x = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64, requires_grad=True)
    good = check("square", lambda: (x * x).sum(), {"x": x})
    bad = check("wrong", lambda: WrongSquare.apply(x).sum(), {"x": x})
    assert good.ok and good.checked == 3
    assert not bad.ok and bad.max_rel_err == pytest.approx(0.1 / 1.1, rel=1e-6)
    assert bad.worst.startswith("x[")


def test_check_samples_coordinates_deterministically():
    x = torch.randn(50, dtype=torch.float64, requires_grad=True)
    a = check("s", lambda: (x ** 3).sum(), {"x": x}, max_per_tensor=4, seed=1)
    b = check("s", lambda: (x ** 3).sum(), {"x": x}, max_per_tensor=4, seed=1)
    assert a.checked == 4 and a.worst == b.worst and a.max_rel_err == b.max_rel_err


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_component_probes_pass():
    for rep in crf_probe(3) + [encoder_probe(3)]:
        assert rep.ok, rep
