import json
import math

import numpy as np
import pytest
import torch

from conftest import (
    fixed_noise,
    linear_gaussian_vae,
    random_binary,
    toy_cagem_config,
    toy_model,
    toy_vae_config,
)
from cagem.errors import ConfigError, DegenerateDataError
from cagem.evaluation import (
    MetricsLogger,
    elbo_decompose,
    iw_bound,
    latent_export,
    pca_project,
    write_latent_table,
)


class TestIwBound:
    def test_exact_posterior_weight_is_marginal(self):
        # with the exact posterior wired in, every importance weight equals
        # the marginal, so the bound is tight at any L
        model, exact_log_px, _ = linear_gaussian_vae(q_std_scale=1.0)
        x = torch.tensor([[0.4], [-1.3], [2.0]], dtype=torch.float64)
        est = iw_bound(model, x, L=1, generator=torch.Generator().manual_seed(0))
        np.testing.assert_allclose(est.per_example, exact_log_px(x), atol=1e-9)

    def test_inflated_posterior_converges_to_marginal(self):
        model, exact_log_px, _ = linear_gaussian_vae(q_std_scale=1.1)
        x = torch.tensor([[0.7], [-0.2]], dtype=torch.float64)
        est = iw_bound(model, x, L=2000,
                       generator=torch.Generator().manual_seed(1))
        np.testing.assert_allclose(est.per_example, exact_log_px(x), atol=0.05)

    def test_bound_tightens_with_more_samples(self):
        model, _, _ = linear_gaussian_vae(q_std_scale=1.5)
        x = torch.tensor([[0.5], [-1.0], [1.5], [0.0]], dtype=torch.float64)
        reps = 40
        means = {L: [] for L in (1, 10, 100)}
        for r in range(reps):
            for L in means:
                g = torch.Generator().manual_seed(1000 * r + L)
                means[L].append(iw_bound(model, x, L=L, generator=g).bound)
        stats = {L: (np.mean(v), np.std(v) / math.sqrt(reps))
                 for L, v in means.items()}
        assert stats[10][0] - stats[1][0] > -1 * (stats[10][1] + stats[1][1])
        assert stats[100][0] - stats[10][0] > -1 * (stats[100][1] + stats[10][1])
        assert stats[100][0] > stats[1][0]

    def test_chunking_does_not_change_result(self):
        model = toy_model(toy_cagem_config(k=2))
        x = random_binary(3, 3)
        a = iw_bound(model, x, L=23, chunk_size=100,
                     generator=torch.Generator().manual_seed(4))
        b = iw_bound(model, x, L=23, chunk_size=7,
                     generator=torch.Generator().manual_seed(4))
        np.testing.assert_allclose(a.per_example, b.per_example, rtol=1e-12)

    def test_invalid_sample_count(self):
        model = toy_model(toy_vae_config())
        with pytest.raises(ConfigError):
            iw_bound(model, random_binary(2, 3), L=0)


class TestElboDecompose:
    @pytest.mark.parametrize("variant", ["vae", "cagem"])
    def test_terms_partition_elbo(self, variant):
        cfg = (toy_cagem_config(k=3) if variant == "cagem"
               else toy_vae_config())
        model = toy_model(cfg, seed=2)
        x = random_binary(6, cfg.x_dim)
        noise = fixed_noise(6, cfg, seed=1)
        _, table = elbo_decompose(model, x, noise=noise)
        assert table["elbo"] == pytest.approx(
            table["reconstruction"] + table["z1_terms"] + table["z2_log_ratio"],
            abs=1e-6)
        direct = model.elbo(x, tau=1.0, noise=noise).elbo.mean().item()
        assert table["elbo"] == pytest.approx(direct, abs=1e-6)

    def test_activity_nonnegative(self):
        model = toy_model(toy_cagem_config(k=2))
        report, _ = elbo_decompose(model, random_binary(5, 3),
                                   generator=torch.Generator().manual_seed(0))
        assert report.kl_z1 >= 0 and report.kl_z2 >= 0

    def test_prior_matched_top_layer_is_inactive(self):
        model = toy_model(toy_vae_config(hidden=(), batch_norm=False))
        with torch.no_grad():  # q(z2|z1) pinned to the standard normal prior
            model.q_z2.mean.weight.zero_()
            model.q_z2.mean.bias.zero_()
            model.q_z2.log_std.weight.zero_()
            model.q_z2.log_std.bias.zero_()
        report, _ = elbo_decompose(model, random_binary(5, 3),
                                   generator=torch.Generator().manual_seed(0))
        assert report.kl_z2 == pytest.approx(0.0, abs=1e-12)
        assert report.kl_z1 > 0


class TestPca:
    def test_matches_eigendecomposition(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(50, 4)) @ np.diag([3.0, 1.0, 0.5, 0.1])
        proj = pca_project(data, n_components=2)
        centered = data - data.mean(0)
        eigvals = np.sort(np.linalg.eigvalsh(centered.T @ centered))[::-1]
        np.testing.assert_allclose((proj ** 2).sum(0), eigvals[:2], rtol=1e-10)

    def test_full_rank_projection_preserves_distances(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(20, 3))
        proj = pca_project(data, n_components=3)
        d0 = np.linalg.norm(data[:, None] - data[None, :], axis=-1)
        d1 = np.linalg.norm(proj[:, None] - proj[None, :], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-10)

    def test_narrow_input_zero_padded(self):
        proj = pca_project(np.array([[0.0], [1.0], [2.0]]), n_components=2)
        assert proj.shape == (3, 2)
        np.testing.assert_array_equal(proj[:, 1], 0.0)

    def test_degenerate_inputs(self):
        with pytest.raises(DegenerateDataError):
            pca_project(np.zeros((1, 3)))
        with pytest.raises(DegenerateDataError):
            pca_project(np.ones((4, 3)))


def test_latent_export_and_table(tmp_path):
    model = toy_model(toy_cagem_config(k=2))
    x = random_binary(6, 3)
    labels = [0, 1, 1, 0, 1, 0]
    export = latent_export(model, x, labels=labels)
    assert export["z1"].shape == (6, 2) and export["z2"].shape == (6, 2)
    assert export["z1_pca"].shape == (6, 2)
    path = tmp_path / "latents.tsv"
    write_latent_table(path, export)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 7
    header = lines[0].split("\t")
    assert header[:2] == ["id", "label"]
    row = lines[1].split("\t")
    assert len(row) == len(header)
    assert float(row[2]) == pytest.approx(export["z1"][0, 0])


def test_metrics_logger_json_lines(tmp_path):
    path = tmp_path / "metrics.jsonl"
    logger = MetricsLogger(path, run_id="run-a", seed=3)
    logger.log(0, "elbo", -120.5)
    logger.log(5, "iw_bound", -100.25, L=100)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records[0] == {"run_id": "run-a", "epoch": 0, "metric": "elbo",
                          "value": -120.5, "L": None, "seed": 3}
    assert records[1]["L"] == 100 and records[1]["metric"] == "iw_bound"
