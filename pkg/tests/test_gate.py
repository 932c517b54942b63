import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import check_gradients
from sarcexp.gate import FusionGate, gate_forward

F64 = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, dtype=F64, generator=torch.Generator().manual_seed(seed))


def make_gate(dim=8, seed=0, zero=False):
    torch.manual_seed(seed)
    gate = FusionGate(dim).double()
    if zero:
        with torch.no_grad():
            for p in gate.parameters():
                p.zero_()
    return gate


def test_zero_weights_give_half():
    gate = make_gate(zero=True)
    z_img, z_ocr = rand(5, 8), rand(5, 8, seed=1)
    fused, lam = gate_forward(z_img, z_ocr, gate)
    assert lam.item() == 0.5
    assert torch.equal(fused, 0.5 * z_img + z_ocr)


def test_same_stream_with_zero_weights_is_one_and_a_half_times():
    z = rand(4, 8)
    fused, _ = gate_forward(z, z, make_gate(zero=True))
    assert torch.equal(fused, 1.5 * z)


def test_zero_image_stream_passes_ocr_through():
    z_ocr = rand(4, 8)
    fused, _ = gate_forward(torch.zeros(4, 8, dtype=F64), z_ocr, make_gate(seed=3))
    assert torch.equal(fused, z_ocr)


def test_output_has_r_rows():
    fused, lam = make_gate()(rand(3, 6, 8), rand(3, 6, 8, seed=1), torch.ones(3, 6, dtype=torch.bool))
    assert fused.shape == (3, 6, 8) and lam.shape == (3,)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**20), st.floats(0.1, 50.0))
def test_gate_is_strictly_inside_unit_interval(seed, scale):
    gate = make_gate(seed=seed % 97)
    _, lam = gate(rand(4, 5, 8, seed=seed) * scale, rand(4, 5, 8, seed=seed + 1) * scale, torch.ones(4, 5, dtype=torch.bool))
    assert torch.all((lam > 0) & (lam < 1))


def test_pooling_respects_mask():
    gate = make_gate(seed=1)
    z_img, z_ocr = rand(4, 8), rand(4, 8, seed=1)
    mask = torch.tensor([True, True, False, False])
    _, lam = gate_forward(z_img, z_ocr, gate, mask)
    z_img2, z_ocr2 = z_img.clone(), z_ocr.clone()
    z_img2[2:] += 100
    z_ocr2[2:] -= 100
    _, lam2 = gate_forward(z_img2, z_ocr2, gate, mask)
    assert lam.item() == lam2.item()


def test_fully_masked_is_an_error():
    with pytest.raises(ValueError, match="fully masked"):
        gate_forward(rand(3, 8), rand(3, 8), make_gate(), torch.zeros(3, dtype=torch.bool))


def test_missing_ocr_uses_null_vector_and_zero_stream():
    gate = make_gate(seed=2)
    with torch.no_grad():
        gate.null_ocr.copy_(rand(8, seed=9))
    z_img, z_ocr = rand(4, 8), rand(4, 8, seed=1)
    fused, lam = gate_forward(z_img, z_ocr, gate, ocr_present=False)
    pooled = torch.cat([z_img.mean(0), gate.null_ocr])
    expected = torch.sigmoid(gate.fc2(torch.tanh(gate.fc1(pooled))))
    assert torch.allclose(lam, expected.squeeze(), atol=1e-15)
    assert torch.allclose(fused, lam * z_img, atol=1e-15)


def test_stream_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        gate_forward(rand(3, 8), rand(4, 8), make_gate())


def test_gate_gradients_match_finite_differences():
    gate = make_gate(dim=4, seed=5)
    z_img, z_ocr = rand(3, 4), rand(3, 4, seed=1)
    target = rand(3, 4, seed=2)

    def loss():
        fused, lam = gate_forward(z_img, z_ocr, gate)
        return (fused * target).sum() + lam

    errors = check_gradients(loss, [(n, p) for n, p in gate.named_parameters() if n != "null_ocr"])
    assert max(errors.values()) < 1e-4, errors
    loss_absent = lambda: (gate_forward(z_img, z_ocr, gate, ocr_present=False)[0] * target).sum()
    assert check_gradients(loss_absent, [("null_ocr", gate.null_ocr)])["null_ocr"] < 1e-4
