"""Generative/inference factorizations and single-sample ELBO estimators.

Two variants share the same two-layer latent skeleton:

* ``vae``:   p(x|z1) p(z1|z2) p(z2)   with   q(z1|x) q(z2|z1)
* ``cagem``: p(x|y,z1) p(z1|y,z2) p(y|z2) p(z2)
             with q(z1|x) q(y|z1,x) q(z2|x,y,z1); the sum over the discrete
             cluster variable y is carried out analytically.

Parameters are float64 by default (float32 selectable per config). Sampling is driven either by an explicit noise
dict (for shared-noise oracles) or by an explicit ``torch.Generator``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .distributions import (
    BernoulliParams,
    GaussianParams,
    bernoulli_log_prob,
    categorical_log_prob,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_rsample,
    standard_normal_params,
)
from .errors import ConfigError, DataFormatError, DimensionError, NumericalError
from .nets import (
    BatchNormMode,
    BernoulliHead,
    CategoricalHead,
    GaussianHead,
    one_hot,
)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "cagem-checkpoint-v1"


@dataclass
class ModelConfig:
    """Dimensions and hyperparameters; the single source of truth for a run."""

    x_dim: int
    z1_dim: int = 64
    z2_dim: int = 32
    n_clusters: int = 10
    hidden: tuple = (1024, 512)
    variant: str = "cagem"  # "vae" | "cagem"
    likelihood: str = "bernoulli"  # "bernoulli" | "gaussian"
    batch_norm: bool = True
    dtype: str = "float64"  # "float64" | "float32"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant not in ("vae", "cagem"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        for name in ("x_dim", "z1_dim", "z2_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # n_clusters == 1 is permitted: it is the exact VAE-degenerate case.
        if self.variant == "cagem" and self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1 for cagem")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ElboTerms:
    """Per-example ELBO decomposition at the temperature used."""

    log_px: Tensor       # reconstruction term, [B]
    latent_term: Tensor  # sum of the remaining log-ratio terms, [B]
    class_weights: Tensor  # q(y|z1,x) at the drawn z1, [B, K] (ones for VAE)
    elbo: Tensor         # log_px + tau * latent_term, [B]
    tau: float


@dataclass
class VaeForward:
    """Raw per-term tensors from one VAE forward pass, shapes [B] / [B, dim]."""

    z1: Tensor
    z2: Tensor
    log_qz1: Tensor
    log_qz2: Tensor
    log_px: Tensor
    log_pz1: Tensor
    log_pz2: Tensor
    kl_z1: Tensor  # analytic KL[q(z1|x) || p(z1|z2)] at the drawn z2
    kl_z2: Tensor  # analytic KL[q(z2|z1) || p(z2)]


@dataclass
class CagemForward:
    """Raw per-term tensors from one CaGeM forward pass.

    Per-class tensors have shape [B, K]; one z2 sample is drawn per class.
    """

    z1: Tensor
    z2: Tensor            # [B, K, z2_dim]
    log_qz1: Tensor       # [B]
    class_weights: Tensor  # [B, K]
    log_qz2: Tensor       # [B, K]
    log_px: Tensor        # [B, K]
    log_pz1: Tensor       # [B, K]
    log_py: Tensor        # [B, K]
    log_pz2: Tensor       # [B, K]
    kl_z1: Tensor         # [B, K] analytic KL[q(z1|x) || p(z1|c,z2^c)]
    kl_z2: Tensor         # [B, K] analytic KL[q(z2|x,c,z1) || p(z2)]


@dataclass
class GeneratedBatch:
    means: Tensor
    samples: Optional[Tensor]
    y: Optional[Tensor]
    z1: Tensor
    z2: Tensor


@dataclass
class ParamStore:
    """Named trainable arrays split into the four gradient-rule groups."""

    theta_rest: dict = field(default_factory=dict)
    theta_y: dict = field(default_factory=dict)
    phi_rest: dict = field(default_factory=dict)
    phi_y: dict = field(default_factory=dict)

    def groups(self) -> dict:
        return {
            "theta_rest": self.theta_rest,
            "theta_y": self.theta_y,
            "phi_rest": self.phi_rest,
            "phi_y": self.phi_y,
        }

    @classmethod
    def from_model(cls, model: "BaseModel") -> "ParamStore":
        store = cls()
        for name, param in model.named_parameters():
            head = name.split(".", 1)[0]
            store.groups()[model.head_groups()[head]][name] = param
        total = sum(len(g) for g in store.groups().values())
        if total != len(list(model.named_parameters())):
            raise ConfigError("parameter groups are not exhaustive")
        return store


def _check_noise(noise: Tensor, shape, what: str, dtype=DTYPE) -> Tensor:
    if tuple(noise.shape) != tuple(shape):
        raise DimensionError(
            f"{what}: noise shape {tuple(noise.shape)} != expected {tuple(shape)}"
        )
    return noise.to(dtype)


def _randn(shape, generator, device=None, dtype=DTYPE) -> Tensor:
    return torch.randn(shape, dtype=dtype, generator=generator, device=device)


def _raise_if_nonfinite(**named: Tensor) -> None:
    for name, value in named.items():
        if not torch.isfinite(value).all():
            raise NumericalError(f"non-finite value in term '{name}'")


class BaseModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.config.dtype == "float64" else torch.float32

    def _make_likelihood_head(self, in_dim: int):
        cfg = self.config
        if cfg.likelihood == "bernoulli":
            return BernoulliHead(in_dim, cfg.hidden, cfg.x_dim, batch_norm=cfg.batch_norm)
        return GaussianHead(in_dim, cfg.hidden, cfg.x_dim, batch_norm=cfg.batch_norm)

    def _log_px(self, x: Tensor, params) -> Tensor:
        if isinstance(params, BernoulliParams):
            return bernoulli_log_prob(x, params)
        return gaussian_log_prob(x, params)

    def _check_x(self, x: Tensor) -> Tensor:
        if x.dim() != 2 or x.shape[1] != self.config.x_dim:
            raise DimensionError(
                f"expected x of shape [batch, {self.config.x_dim}], got {tuple(x.shape)}"
            )
        return x.to(self.dtype)

    def param_store(self) -> ParamStore:
        return ParamStore.from_model(self)


class VAE(BaseModel):
    """Two-layer VAE with bottom-up inference."""

    def __init__(self, config: ModelConfig):
        if config.variant != "vae":
            raise ConfigError("VAE requires variant='vae'")
        super().__init__(config)
        cfg = config
        bn = cfg.batch_norm
        self.q_z1 = GaussianHead(cfg.x_dim, cfg.hidden, cfg.z1_dim, batch_norm=bn)
        self.q_z2 = GaussianHead(cfg.z1_dim, cfg.hidden, cfg.z2_dim, batch_norm=bn)
        self.p_z1 = GaussianHead(cfg.z2_dim, cfg.hidden, cfg.z1_dim, batch_norm=bn)
        self.p_x = self._make_likelihood_head(cfg.z1_dim)
        self.to(self.dtype)

    @staticmethod
    def head_groups() -> dict:
        return {"q_z1": "phi_rest", "q_z2": "phi_rest",
                "p_z1": "theta_rest", "p_x": "theta_rest"}

    def forward_detail(self, x: Tensor, mode: BatchNormMode,
                       noise: Optional[dict] = None,
                       generator: Optional[torch.Generator] = None) -> VaeForward:
        x = self._check_x(x)
        b, cfg = x.shape[0], self.config
        if noise is None:
            eps1 = _randn((b, cfg.z1_dim), generator, x.device, self.dtype)
            eps2 = _randn((b, cfg.z2_dim), generator, x.device, self.dtype)
        else:
            eps1 = _check_noise(noise["z1"], (b, cfg.z1_dim), "z1 noise", self.dtype)
            eps2 = _check_noise(noise["z2"], (b, cfg.z2_dim), "z2 noise", self.dtype)
        qz1 = self.q_z1(x, mode)
        z1 = gaussian_rsample(qz1, eps1)
        qz2 = self.q_z2(z1, mode)
        z2 = gaussian_rsample(qz2, eps2)
        pz2 = standard_normal_params(z2.shape, dtype=self.dtype, device=x.device)
        pz1 = self.p_z1(z2, mode)
        px = self.p_x(z1, mode)
        return VaeForward(
            z1=z1, z2=z2,
            log_qz1=gaussian_log_prob(z1, qz1),
            log_qz2=gaussian_log_prob(z2, qz2),
            log_px=self._log_px(x, px),
            log_pz1=gaussian_log_prob(z1, pz1),
            log_pz2=gaussian_log_prob(z2, pz2),
            kl_z1=gaussian_kl(qz1, pz1),
            kl_z2=gaussian_kl(qz2, pz2),
        )

    def elbo(self, x: Tensor, tau: float = 1.0,
             mode: BatchNormMode = BatchNormMode.EVAL_FROZEN,
             noise: Optional[dict] = None,
             generator: Optional[torch.Generator] = None) -> ElboTerms:
        d = self.forward_detail(x, mode, noise=noise, generator=generator)
        latent = d.log_pz1 + d.log_pz2 - d.log_qz1 - d.log_qz2
        _raise_if_nonfinite(log_px=d.log_px, latent_term=latent)
        weights = torch.ones(x.shape[0], 1, dtype=self.dtype, device=x.device)
        return ElboTerms(log_px=d.log_px, latent_term=latent,
                         class_weights=weights,
                         elbo=d.log_px + tau * latent, tau=tau)

    def log_weights(self, d: VaeForward) -> Tensor:
        """Single-sample importance log-weight log p(x,z1,z2) - log q(z1,z2|x)."""
        return d.log_px + d.log_pz1 + d.log_pz2 - d.log_qz1 - d.log_qz2

    @torch.no_grad()
    def generate(self, n: int, y_fixed=None,
                 generator: Optional[torch.Generator] = None,
                 binarize: bool = False) -> GeneratedBatch:
        if y_fixed is not None:
            raise ConfigError("the VAE variant has no class variable")
        cfg = self.config
        mode = BatchNormMode.EVAL_FROZEN
        z2 = _randn((n, cfg.z2_dim), generator, dtype=self.dtype)
        z1 = gaussian_rsample(self.p_z1(z2, mode), _randn((n, cfg.z1_dim), generator, dtype=self.dtype))
        px = self.p_x(z1, mode)
        means = px.mean
        samples = None
        if binarize and isinstance(px, BernoulliParams):
            samples = torch.bernoulli(means, generator=generator)
        return GeneratedBatch(means=means, samples=samples, y=None, z1=z1, z2=z2)


class CaGeM(BaseModel):
    """Cluster-aware generative model with a K-way discrete latent."""

    def __init__(self, config: ModelConfig):
        if config.variant != "cagem":
            raise ConfigError("CaGeM requires variant='cagem'")
        super().__init__(config)
        cfg = config
        bn, k = cfg.batch_norm, cfg.n_clusters
        self.q_z1 = GaussianHead(cfg.x_dim, cfg.hidden, cfg.z1_dim, batch_norm=bn)
        # phi_y head; inputs [z1, x]
        self.q_y = CategoricalHead(cfg.z1_dim + cfg.x_dim, cfg.hidden, k, batch_norm=bn)
        # skip connection: raw x feeds the z2 inference trunk; inputs [x, y, z1]
        self.q_z2 = GaussianHead(cfg.x_dim + k + cfg.z1_dim, cfg.hidden, cfg.z2_dim,
                                 batch_norm=bn)
        # theta_y head
        self.p_y = CategoricalHead(cfg.z2_dim, cfg.hidden, k, batch_norm=bn)
        self.p_z1 = GaussianHead(k + cfg.z2_dim, cfg.hidden, cfg.z1_dim, batch_norm=bn)
        self.p_x = self._make_likelihood_head(cfg.z1_dim + k)
        self.to(self.dtype)

    @staticmethod
    def head_groups() -> dict:
        return {"q_z1": "phi_rest", "q_z2": "phi_rest", "q_y": "phi_y",
                "p_z1": "theta_rest", "p_x": "theta_rest", "p_y": "theta_y"}

    def forward_detail(self, x: Tensor, mode: BatchNormMode,
                       noise: Optional[dict] = None,
                       generator: Optional[torch.Generator] = None) -> CagemForward:
        x = self._check_x(x)
        b, cfg = x.shape[0], self.config
        k = cfg.n_clusters
        if noise is None:
            eps1 = _randn((b, cfg.z1_dim), generator, x.device, self.dtype)
            eps2 = _randn((b, k, cfg.z2_dim), generator, x.device, self.dtype)
        else:
            eps1 = _check_noise(noise["z1"], (b, cfg.z1_dim), "z1 noise", self.dtype)
            eps2 = _check_noise(noise["z2"], (b, k, cfg.z2_dim), "z2 noise", self.dtype)
        qz1 = self.q_z1(x, mode)
        z1 = gaussian_rsample(qz1, eps1)
        log_qz1 = gaussian_log_prob(z1, qz1)
        weights = self.q_y([z1, x], mode).probs  # [B, K]

        per_class = {name: [] for name in
                     ("z2", "log_qz2", "log_px", "log_pz1", "log_py", "log_pz2",
                      "kl_z1", "kl_z2")}
        for c in range(k):
            y = one_hot(torch.full((b,), c, dtype=torch.long, device=x.device), k,
                        dtype=self.dtype, device=x.device)
            qz2 = self.q_z2([x, y, z1], mode)
            z2c = gaussian_rsample(qz2, eps2[:, c, :])
            pz2 = standard_normal_params(z2c.shape, dtype=self.dtype, device=x.device)
            pz1 = self.p_z1([y, z2c], mode)
            py = self.p_y(z2c, mode)
            px = self.p_x([z1, y], mode)
            per_class["z2"].append(z2c)
            per_class["log_qz2"].append(gaussian_log_prob(z2c, qz2))
            per_class["log_px"].append(self._log_px(x, px))
            per_class["log_pz1"].append(gaussian_log_prob(z1, pz1))
            per_class["log_py"].append(categorical_log_prob(c, py))
            per_class["log_pz2"].append(gaussian_log_prob(z2c, pz2))
            per_class["kl_z1"].append(gaussian_kl(qz1, pz1))
            per_class["kl_z2"].append(gaussian_kl(qz2, pz2))
        stacked = {name: torch.stack(vals, dim=1) for name, vals in per_class.items()}
        return CagemForward(z1=z1, log_qz1=log_qz1, class_weights=weights, **stacked)

    def elbo(self, x: Tensor, tau: float = 1.0,
             mode: BatchNormMode = BatchNormMode.EVAL_FROZEN,
             noise: Optional[dict] = None,
             generator: Optional[torch.Generator] = None) -> ElboTerms:
        d = self.forward_detail(x, mode, noise=noise, generator=generator)
        w = d.class_weights
        log_w = w.clamp_min(1e-12).log()
        latent_c = (d.log_pz1 + d.log_py + d.log_pz2
                    - log_w - d.log_qz1.unsqueeze(1) - d.log_qz2)
        log_px = (w * d.log_px).sum(1)
        latent = (w * latent_c).sum(1)
        _raise_if_nonfinite(log_px=log_px, latent_term=latent, class_weights=w)
        return ElboTerms(log_px=log_px, latent_term=latent, class_weights=w,
                         elbo=log_px + tau * latent, tau=tau)

    def log_weights(self, d: CagemForward) -> Tensor:
        """Single-sample importance log-weight; the class sum is analytic.

        w = sum_c p(x, c, z1, z2^c) / (q(z1|x) q(z2^c|x,c,z1)); unbiased for p(x).
        """
        log_terms = (d.log_px + d.log_pz1 + d.log_py + d.log_pz2
                     - d.log_qz1.unsqueeze(1) - d.log_qz2)
        return torch.logsumexp(log_terms, dim=1)

    @torch.no_grad()
    def generate(self, n: int, y_fixed=None,
                 generator: Optional[torch.Generator] = None,
                 binarize: bool = False) -> GeneratedBatch:
        cfg = self.config
        k = cfg.n_clusters
        mode = BatchNormMode.EVAL_FROZEN
        z2 = _randn((n, cfg.z2_dim), generator, dtype=self.dtype)
        if y_fixed is not None:
            if not 0 <= int(y_fixed) < k:
                raise ConfigError(f"y_fixed={y_fixed} out of range [0, {k})")
            y = torch.full((n,), int(y_fixed), dtype=torch.long)
        elif n == 0:
            y = torch.zeros(0, dtype=torch.long)
        else:
            probs = self.p_y(z2, mode).probs
            y = torch.multinomial(probs, 1, generator=generator).squeeze(1)
        yh = one_hot(y, k, dtype=self.dtype)
        z1 = gaussian_rsample(self.p_z1([yh, z2], mode),
                              _randn((n, cfg.z1_dim), generator, dtype=self.dtype))
        px = self.p_x([z1, yh], mode)
        means = px.mean
        samples = None
        if binarize and isinstance(px, BernoulliParams):
            samples = torch.bernoulli(means, generator=generator)
        return GeneratedBatch(means=means, samples=samples, y=y, z1=z1, z2=z2)


def build_model(config: ModelConfig) -> BaseModel:
    return VAE(config) if config.variant == "vae" else CaGeM(config)


def save_checkpoint(path, model: BaseModel, extra: Optional[dict] = None) -> None:
    """Self-describing archive: format tag, config, named parameter arrays."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, extra). Raises DataFormatError on bad or foreign files."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(
            f"checkpoint {path} has format {payload.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    config = ModelConfig.from_dict(payload["config"])
    model = build_model(config)
    model.load_state_dict(payload["state"])
    return model, payload.get("extra", {})
