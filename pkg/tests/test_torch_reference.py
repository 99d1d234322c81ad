"""Forward and gradient agreement with torch on the primitives the model is built from."""

import numpy as np
import pytest

from app.engine import ops
from app.engine.tensor import backward, default_dtype, parameter
from app.models.attention import scaled_attention

torch = pytest.importorskip("torch")

pytestmark = pytest.mark.unit


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def _weighted_sum(out, weights):
    loss = ops.mul(out, weights).sum()
    backward(loss)
    return loss


def test_layer_norm_matches_torch(rng):
    x, gain, bias = rng.normal(size=(3, 5, 8)), rng.normal(size=8), rng.normal(size=8)
    weights = rng.normal(size=(3, 5, 8))
    px, pg, pb = parameter(x), parameter(gain), parameter(bias)
    out = ops.layer_norm(px, pg, pb, eps=1e-6)
    _weighted_sum(out, weights)

    tx, tg, tb = (torch.tensor(a, requires_grad=True) for a in (x, gain, bias))
    ref = torch.nn.functional.layer_norm(tx, (8,), tg, tb, eps=1e-6)
    (ref * torch.tensor(weights)).sum().backward()

    np.testing.assert_allclose(out.data, ref.detach().numpy(), atol=1e-10)
    for ours, theirs in ((px, tx), (pg, tg), (pb, tb)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), atol=1e-9)


def test_gelu_matches_torch(rng):
    x = rng.normal(size=(4, 6)) * 3
    weights = rng.normal(size=(4, 6))
    px = parameter(x)
    out = ops.gelu(px)
    _weighted_sum(out, weights)

    tx = torch.tensor(x, requires_grad=True)
    ref = torch.nn.functional.gelu(tx)
    (ref * torch.tensor(weights)).sum().backward()

    np.testing.assert_allclose(out.data, ref.detach().numpy(), atol=1e-10)
    np.testing.assert_allclose(px.grad, tx.grad.numpy(), atol=1e-9)


def test_masked_attention_matches_torch(rng):
    q, k, v = (rng.normal(size=(2, 2, 5, 4)) for _ in range(3))
    mask = np.zeros((2, 5), dtype=bool)
    mask[1, 3:] = True
    weights = rng.normal(size=(2, 2, 5, 4))
    pq, pk, pv = parameter(q), parameter(k), parameter(v)
    out, _ = scaled_attention(pq, pk, pv, key_mask=mask)
    _weighted_sum(out, weights)

    tq, tk, tv = (torch.tensor(a, requires_grad=True) for a in (q, k, v))
    ref = torch.nn.functional.scaled_dot_product_attention(tq, tk, tv, attn_mask=torch.tensor(~mask)[:, None, None, :])
    (ref * torch.tensor(weights)).sum().backward()

    np.testing.assert_allclose(out.data, ref.detach().numpy(), atol=1e-9)
    for ours, theirs in ((pq, tq), (pk, tk), (pv, tv)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), atol=1e-8)


def test_bce_matches_torch(rng):
    logits = rng.normal(size=(6, 3)) * 4
    labels = rng.integers(0, 2, size=(6, 3))
    pz = parameter(logits)
    loss = ops.bce_with_logits(pz, labels)
    backward(loss)

    tz = torch.tensor(logits, requires_grad=True)
    ref = torch.nn.functional.binary_cross_entropy_with_logits(tz, torch.tensor(labels, dtype=torch.float64))
    ref.backward()

    assert loss.item() == pytest.approx(ref.item(), abs=1e-12)
    np.testing.assert_allclose(pz.grad, tz.grad.numpy(), atol=1e-12)
