"""
Ternary weight splitting, for single tensors and for whole models.
"""
import pytest
import torch

from bitsplit.exceptions import ConfigurationError, DegenerateTernaryError
from bitsplit.pipeline import check_split
from bitsplit.quantizers import binarize, ternarize
from bitsplit.schemas import QuantConfig, QuantScheme
from bitsplit.splitting import split_model, tws_split
from bitsplit.transformer import build, plan_precision, uniform_precision


def assert_valid_split(w, granularity="matrix"):
    t = ternarize(w, granularity)
    split = tws_split(t)
    tol = 1e-12 * max(1.0, float(t.alpha.max()))
    assert split.quantized_error <= tol

    first, second = binarize(split.w1, granularity), binarize(split.w2, granularity)
    assert (first.alpha - second.alpha).abs().max() <= tol
    assert (first.alpha + second.alpha - t.alpha).abs().max() <= tol
    assert ((split.a > 0) & (split.a < 1)).all()
    assert (split.b >= 0).all()

    # bit-exact on I and wherever b <= |w|; elsewhere w1 + w2 is within half an ulp of b
    total = split.w1 + split.w2
    exact = t.support | (split.b <= w.abs())
    assert torch.equal(total[exact], w[exact])
    assert ((total - w).abs() <= 2 ** -52 * (split.b + w.abs())).all()


def random_matrices(count, seed=0):
    """Gaussian, uniform and Student-t (3 degrees of freedom) draws, 8 to 64 rows and columns."""
    gen = torch.Generator().manual_seed(seed)
    for i in range(count):
        rows, cols = torch.randint(8, 65, (2,), generator=gen).tolist()
        if i % 3 == 0:
            yield torch.randn(rows, cols, generator=gen)
        elif i % 3 == 1:
            yield torch.rand(rows, cols, generator=gen) * 2 - 1
        else:
            chi2 = torch.randn(3, rows, cols, generator=gen).pow(2).sum(dim=0)
            yield torch.randn(rows, cols, generator=gen) / torch.sqrt(chi2 / 3)


def test_split_worked_example():
    w = torch.tensor([0.8, -0.6, 0.05, -0.05])
    split = tws_split(ternarize(w))
    assert split.a.item() == pytest.approx(0.5)
    assert split.b.item() == pytest.approx(0.325)
    assert torch.allclose(split.w1, torch.tensor([0.4, -0.3, 0.375, 0.325]))
    assert torch.allclose(split.w2, torch.tensor([0.4, -0.3, -0.325, -0.375]))

    w_hat = binarize(split.w1).w_hat + binarize(split.w2).w_hat
    assert torch.allclose(w_hat, torch.tensor([0.7, -0.7, 0.0, 0.0]), atol=1e-12)
    assert split.latent_error <= 1e-12
    assert split.quantized_error <= 1e-12


def test_split_balances_unequal_zeroed_mass():
    # J holds more mass than K, so the branch scales only agree with a < 1/2
    w = torch.tensor([1.0, -1.0, 0.3, 0.2, -0.1, 0.25])
    t = ternarize(w)
    assert t.support.tolist() == [True, True, False, False, False, False]
    split = tws_split(t)
    assert split.a.item() == pytest.approx((2.0 - 0.75 + 0.1) / 4.0)
    assert split.b.item() == pytest.approx((6 / 2 * 2.0 - 2.85) / 8)
    assert binarize(split.w1).alpha.item() == pytest.approx(binarize(split.w2).alpha.item(), abs=1e-12)
    assert split.quantized_error <= 1e-12
    assert_valid_split(w)


@pytest.mark.parametrize("shape", [(4, 16), (16, 16), (8, 32)])
@pytest.mark.parametrize("granularity", ["matrix", "row"])
def test_split_preserves_latent_and_quantized_weights(shape, granularity):
    for seed in range(10):
        assert_valid_split(torch.randn(*shape, generator=torch.Generator().manual_seed(seed)), granularity)


def test_split_random_ensemble():
    for w in random_matrices(300):
        assert_valid_split(w)


@pytest.mark.slow
def test_split_random_ensemble_large():
    for w in random_matrices(10_000, seed=1):
        assert_valid_split(w)


def test_split_branch_signs_follow_index_sets():
    w = torch.randn(12, 10, generator=torch.Generator().manual_seed(11))
    t = ternarize(w)
    split = tws_split(t)
    assert torch.equal(torch.sign(split.w1[t.support]), torch.sign(w[t.support]))
    assert torch.equal(torch.sign(split.w2[t.support]), torch.sign(w[t.support]))
    assert (split.w1[t.zero_pos] > 0).all() and (split.w2[t.zero_pos] < 0).all()
    assert (split.w1[t.zero_neg] > 0).all() and (split.w2[t.zero_neg] < 0).all()


def test_split_of_all_zero_matrix_is_degenerate():
    with pytest.raises(DegenerateTernaryError):
        tws_split(ternarize(torch.zeros(3, 3)), tag="layer0.query")


def test_split_model_keeps_logits(tiny_spec, exact_quant, token_batch):
    ternary = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), exact_quant, dropout=0.0)
    binary = split_model(ternary)

    assert all(module.is_pair for module in binary.matrices().values())
    assert all(scheme.kind == "binary" for scheme in binary.precision.values())
    assert not any(module.is_pair for module in ternary.matrices().values())

    ternary.eval()
    binary.eval()
    with torch.no_grad():
        before = ternary(token_batch.input_ids, token_batch.token_type_ids).logits
        after = binary(token_batch.input_ids, token_batch.token_type_ids).logits
    assert (before - after).abs().max() <= 1e-9


def test_split_model_keeps_predictions_with_quantized_activations(tiny_spec, tiny_task):
    for quant in (QuantConfig(), QuantConfig(activation_quantizer="lsq")):
        ternary = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), quant, dropout=0.0)
        check = check_split(ternary, split_model(ternary), tiny_task.dev, batch_size=8)
        assert check.predictions_match
        assert check.max_logit_diff <= 1e-6


def test_split_model_leaves_binary_matrices_alone(tiny_spec, exact_quant):
    half = tiny_spec.at_width(0.5)
    mixed = build(half, plan_precision(half, {"layer0.ffn_mid", "pooler"}), exact_quant)
    binary = split_model(mixed)
    pairs = sorted(name for name, module in binary.matrices().items() if module.is_pair)
    assert pairs == ["layer0.ffn_mid", "pooler"]
    assert torch.equal(binary.matrices()["layer1.key"].branches[0], mixed.matrices()["layer1.key"].branches[0])


def test_split_model_rejects_other_schemes(tiny_spec, exact_quant):
    uniform = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.uniform(4)), exact_quant)
    with pytest.raises(ConfigurationError):
        split_model(uniform)

    ternary = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), QuantConfig(scale_rule="ternary"))
    with pytest.raises(ConfigurationError):
        split_model(ternary)

    twice = split_model(build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), exact_quant))
    for module in twice.matrices().values():
        module.scheme = QuantScheme.ternary(module.scheme.granularity)
    with pytest.raises(ConfigurationError):
        split_model(twice)
