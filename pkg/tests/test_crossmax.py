import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from robustkit import crossmax as cm
from robustkit.crossmax import AggregationMode, baseline_aggregate, crossmax

from oracles import crossmax_reference

Z = torch.tensor([[[2.0, 0.0], [1.0, 3.0], [0.0, 1.0]]], dtype=torch.float64)


def test_hand_executed_ab_median():
    # step A -> [[0,-2],[-2,0],[-1,0]], step B subtracts (0,0), median -> [-1, 0]
    out = crossmax(Z, AggregationMode("median", "AB"))
    assert out.tolist() == [[-1.0, 0.0]]
    assert cm.predict(out).item() == 1


def test_b_only_changes_decision():
    # per-class maxes (2,3) -> [[0,-3],[-1,0],[-2,-2]], median -> [-1,-2]
    out = crossmax(Z, AggregationMode("median", "B"))
    assert out.tolist() == [[-1.0, -2.0]]
    assert cm.predict(out).item() == 0


def test_mean_baseline():
    out = baseline_aggregate(Z, "mean")
    assert torch.allclose(out, torch.tensor([[1.0, 4 / 3]], dtype=torch.float64))
    assert cm.predict(out).item() == 1


@pytest.mark.parametrize("kind", ["mean", "plain_median"])
def test_baseline_single_predictor_is_identity(kind):
    z = torch.randn(4, 1, 7, dtype=torch.float64)
    assert torch.equal(baseline_aggregate(z, kind), z[:, 0])


def test_single_predictor_collapses_to_zero():
    z = torch.randn(3, 1, 5, dtype=torch.float64)
    assert torch.equal(crossmax(z), torch.zeros(3, 5, dtype=torch.float64))


def test_identical_predictors_collapse_and_tie_break_low():
    row = torch.randn(1, 1, 6, dtype=torch.float64)
    z = row.expand(2, 4, 6).contiguous()
    out = crossmax(z)
    assert torch.equal(out, torch.zeros(2, 6, dtype=torch.float64))
    assert cm.predict(out).tolist() == [0, 0]


def test_even_count_median_averages_central_pair():
    z = torch.tensor([[[0.0, 1.0], [0.0, 4.0]]], dtype=torch.float64)
    assert crossmax(z, AggregationMode("plain_median", "")).tolist() == [[0.0, 2.5]]


def test_kth_highest():
    z = torch.tensor([[[5.0, 0], [3.0, 0], [4.0, 0], [1.0, 0]]], dtype=torch.float64)
    assert crossmax(z, AggregationMode("kth_highest", "", k=2)).tolist() == [[4.0, 0.0]]
    with pytest.raises(ValueError, match="exceeds"):
        crossmax(z, AggregationMode("kth_highest", "", k=5))
    clamped = crossmax(z, AggregationMode("kth_highest", "", k=9, clamp_k=True))
    assert clamped.tolist() == [[1.0, 0.0]]


def test_invalid_modes():
    with pytest.raises(ValueError):
        AggregationMode("max", "AB")
    with pytest.raises(ValueError):
        AggregationMode("median", "AA")
    with pytest.raises(ValueError):
        crossmax(torch.zeros(2, 3))


def test_argmax_ties_go_to_lowest_index():
    assert cm.predict(torch.tensor([[0.0, 1.0, 1.0, 0.5]])).item() == 1


@pytest.mark.parametrize("mode", [
    AggregationMode("median", n) for n in cm.NORMALIZATIONS
] + [AggregationMode("kth_highest", "AB", k=2), AggregationMode("mean", "BA")])
def test_matches_reference_on_random_blocks(mode):
    rng = np.random.default_rng(0)
    for _ in range(200):
        b, n, c = rng.integers(1, 5), rng.integers(2, 7), rng.integers(2, 9)
        z = rng.normal(size=(b, n, c)) * rng.uniform(0.1, 10)
        got = crossmax(torch.from_numpy(z), mode).numpy()
        want = np.array(crossmax_reference(z.tolist(), mode.normalization, mode.kind, mode.k))
        if mode.kind == "mean":  # summation order differs from the sequential loop
            np.testing.assert_allclose(got, want, rtol=1e-15, atol=1e-15)
        else:
            assert np.array_equal(got, want)


blocks = st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))


@settings(max_examples=150, deadline=None)
@given(blocks)
def test_permutation_invariance(params):
    b, n, c, seed = params
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, n, c, generator=g, dtype=torch.float64)
    perm = torch.randperm(n, generator=g)
    for mode in (cm.CROSSMAX, AggregationMode("kth_highest", "AB", k=1), cm.MEAN):
        a, p = crossmax(z, mode), crossmax(z[:, perm], mode)
        assert torch.allclose(a, p, atol=1e-12, rtol=0)


@settings(max_examples=150, deadline=None)
@given(blocks)
def test_per_predictor_shift_removed_by_leading_a(params):
    b, n, c, seed = params
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, n, c, generator=g, dtype=torch.float64)
    shift = torch.randn(b, n, 1, generator=g, dtype=torch.float64) * 50
    for norm in ("A", "AB"):
        mode = AggregationMode("median", norm)
        assert torch.allclose(crossmax(z, mode), crossmax(z + shift, mode), atol=1e-9, rtol=0)


def test_outlier_boost_has_bounded_effect():
    """Pushing one predictor's class-t logit upward stops moving the output."""
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 5, 4, generator=g, dtype=torch.float64)
    t = 2
    outs = []
    for boost in np.linspace(0, 1000, 41):
        zz = z.clone()
        zz[0, 0, t] += boost
        outs.append(crossmax(zz)[0, t].item())
    outs = np.array(outs)
    assert np.ptp(outs) < 10
    # and the mean aggregate grows without bound
    zz = z.clone()
    zz[0, 0, t] += 1000
    assert baseline_aggregate(zz)[0, t] - baseline_aggregate(z)[0, t] > 150


def test_gradients_flow_through_crossmax():
    z = torch.randn(2, 5, 4, dtype=torch.float64, requires_grad=True)
    crossmax(z).sum().backward()
    assert z.grad is not None and torch.isfinite(z.grad).all()
