import math

import pytest
import torch

from conftest import random_binary, toy_cagem_config, toy_model
from cagem.classify import error_rate, p_classifier, q_classifier
from cagem.distributions import CategoricalParams
from cagem.errors import ConfigError, DimensionError

T = lambda v: torch.tensor(v, dtype=torch.float64)


class TestErrorRate:
    def test_half_wrong(self):
        out = CategoricalParams(probs=T([[0.9, 0.1], [0.4, 0.6]]))
        assert error_rate(out, [0, 0]) == pytest.approx(0.5)

    def test_all_correct(self):
        out = CategoricalParams(probs=T([[0.9, 0.1], [0.2, 0.8]]))
        assert error_rate(out, [0, 1]) == 0.0

    def test_tie_breaks_to_lowest_index(self):
        out = CategoricalParams(probs=T([[0.5, 0.5]]))
        assert error_rate(out, [0]) == 0.0
        assert error_rate(out, [1]) == 1.0

    def test_empty_rejected(self):
        out = CategoricalParams(probs=T([[1.0]]))
        with pytest.raises(DimensionError):
            error_rate(CategoricalParams(probs=T([[1.0]])[:0]), [])
        with pytest.raises(DimensionError):
            error_rate(out, [0, 0])


def test_sample_count_validated():
    model = toy_model(toy_cagem_config(k=2))
    x = random_binary(2, 3)
    with pytest.raises(ConfigError):
        q_classifier(model, x, S=0)
    with pytest.raises(ConfigError):
        p_classifier(model, x, S=0)


def test_outputs_are_simplex():
    model = toy_model(toy_cagem_config(k=4))
    x = random_binary(5, 3)
    g = torch.Generator().manual_seed(0)
    for fn in (q_classifier, p_classifier):
        probs = fn(model, x, S=3, generator=g).probs
        assert probs.shape == (5, 4)
        torch.testing.assert_close(probs.sum(1),
                                   torch.ones(5, dtype=torch.float64))
        assert torch.all(probs >= 0)


def test_constant_head_gives_uniform():
    model = toy_model(toy_cagem_config(k=3))
    with torch.no_grad():
        model.q_y.logits.weight.zero_()
        model.q_y.logits.bias.zero_()
    probs = q_classifier(model, random_binary(4, 3), S=5,
                         generator=torch.Generator().manual_seed(1)).probs
    torch.testing.assert_close(probs, torch.full_like(probs, 1.0 / 3.0))


def test_deterministic_under_fixed_seed():
    model = toy_model(toy_cagem_config(k=3))
    x = random_binary(4, 3)
    a = q_classifier(model, x, S=10, generator=torch.Generator().manual_seed(7))
    b = q_classifier(model, x, S=10, generator=torch.Generator().manual_seed(7))
    assert torch.equal(a.probs, b.probs)


def test_monte_carlo_estimates_agree_across_streams():
    # two independent sample streams must land within joint Monte Carlo error
    model = toy_model(toy_cagem_config(k=3, hidden=(8,)), seed=2)
    x = random_binary(3, 3, seed=5)
    reps, S = 30, 20
    for fn in (q_classifier, p_classifier):
        runs_a = torch.stack([fn(model, x, S=S,
                                 generator=torch.Generator().manual_seed(i)).probs
                              for i in range(reps)])
        runs_b = torch.stack([fn(model, x, S=S,
                                 generator=torch.Generator().manual_seed(1000 + i)).probs
                              for i in range(reps)])
        se = torch.sqrt(runs_a.var(0) / reps + runs_b.var(0) / reps)
        diff = (runs_a.mean(0) - runs_b.mean(0)).abs()
        assert torch.all(diff <= 4 * se + 1e-9)
