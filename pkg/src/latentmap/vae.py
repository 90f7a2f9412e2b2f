"""Gaussian-latent variational autoencoder.

The same architecture serves three roles in the pipeline: the 2000-gene
expression model, the shared-500-gene expression model for cells, and the
shared-500-gene expression model for spots. Observation model is Gaussian
(mean squared error) on log1p-normalized expression; the latent prior is
standard normal.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .errors import DataError, ShapeError


@dataclass
class VaeConfig:
    n_genes: int
    latent_dim: int = 10
    enc_hidden: tuple = (128, 64)

    @property
    def dec_hidden(self):
        return tuple(reversed(self.enc_hidden))

    def to_arch(self):
        return {"n_genes": self.n_genes, "latent_dim": self.latent_dim,
                "enc_hidden": list(self.enc_hidden)}

    @staticmethod
    def from_arch(arch):
        return VaeConfig(n_genes=int(arch["n_genes"]), latent_dim=int(arch["latent_dim"]),
                         enc_hidden=tuple(arch["enc_hidden"]))


class VaeParams:
    """Encoder stack, mu/logvar heads, mirrored decoder stack, output head."""

    def __init__(self, cfg: VaeConfig, rng):
        self.cfg = cfg
        widths = [cfg.n_genes] + list(cfg.enc_hidden)
        self.enc = [nn.init_dense(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        top = widths[-1]
        self.mu_head = nn.init_dense(rng, top, cfg.latent_dim, gain=1.0)
        self.logvar_head = nn.init_dense(rng, top, cfg.latent_dim, gain=1.0)
        dwidths = [cfg.latent_dim] + list(cfg.dec_hidden)
        self.dec = [nn.init_dense(rng, dwidths[i], dwidths[i + 1]) for i in range(len(dwidths) - 1)]
        self.out_head = nn.init_dense(rng, dwidths[-1], cfg.n_genes, gain=1.0)

    def params(self):
        named = [(f"enc{i}", l) for i, l in enumerate(self.enc)]
        named += [("mu", self.mu_head), ("logvar", self.logvar_head)]
        named += [(f"dec{i}", l) for i, l in enumerate(self.dec)]
        named += [("out", self.out_head)]
        return nn.collect_params(named)


def init_vae(cfg: VaeConfig, seed_or_rng) -> VaeParams:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    return VaeParams(cfg, rng)


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.tensor(np.asarray(x, dtype=np.float64))


def encode(p: VaeParams, x):
    """Forward pass to the posterior parameters: (mu, logvar), each [n, d]."""
    x = _as_tensor(x)
    if x.shape[1] != p.cfg.n_genes:
        raise ShapeError(f"encode: input has {x.shape[1]} genes, model expects {p.cfg.n_genes}")
    h = x
    for layer in p.enc:
        h = ad.relu(layer(h))
    return p.mu_head(h), p.logvar_head(h)


def decode(p: VaeParams, z):
    """Latent codes back to expression space (linear output, log1p scale)."""
    z = _as_tensor(z)
    if z.shape[1] != p.cfg.latent_dim:
        raise ShapeError(f"decode: input width {z.shape[1]}, model expects {p.cfg.latent_dim}")
    h = z
    for layer in p.dec:
        h = ad.relu(layer(h))
    return p.out_head(h)


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    noise = _as_tensor(noise)
    if noise.shape != mu.shape or logvar.shape != mu.shape:
        raise ShapeError("reparameterize: mu/logvar/noise shapes differ")
    return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), noise))


def kl_divergence(mu, logvar):
    """Mean over rows of KL(N(mu, diag exp(logvar)) || N(0, I)).

    Per row: 0.5 * sum_d(mu^2 + exp(logvar) - 1 - logvar), always >= 0.
    """
    if mu.shape != logvar.shape:
        raise ShapeError("kl_divergence: mu/logvar shapes differ")
    n = mu.shape[0]
    per_entry = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)),
                       ad.add_scalar(logvar, 1.0))
    return ad.scale(ad.tsum(per_entry), 0.5 / n)


def mse(a, b):
    """Mean over all entries of the squared difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return ad.tmean(ad.square(ad.sub(a, b)))


def vae_loss(p: VaeParams, x, noise, beta: float = 1.0):
    """(total, recon, kl) where total = recon + beta * kl.

    recon is the MSE between the input and its reconstruction through the
    sampled latent.
    """
    x = _as_tensor(x)
    mu, logvar = encode(p, x)
    z = reparameterize(mu, logvar, noise)
    recon = mse(decode(p, z), x)
    kl = kl_divergence(mu, logvar)
    total = ad.add(recon, ad.scale(kl, beta))
    return total, recon, kl


def encode_mu(p: VaeParams, x) -> np.ndarray:
    """Noise-free encoding (the posterior mean), as a plain array."""
    mu, _ = encode(p, ad.tensor(np.asarray(x, dtype=np.float64)))
    return mu.data.copy()


# ---------------------------------------------------------------------------
# latent matrices
# ---------------------------------------------------------------------------

@dataclass
class LatentMatrix:
    """Rows of d-dimensional codes; ``fixed`` marks a frozen training target."""

    codes: np.ndarray
    row_ids: list = field(default_factory=list)
    source: str = "custom"  # sc2000 | sc500 | st_exp500 | st_exp_sp500 | custom
    fixed: bool = False

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2:
            raise DataError("latent codes must be 2-D")
        if self.row_ids and len(self.row_ids) != self.codes.shape[0]:
            raise DataError("row id count does not match latent rows")
        if self.fixed:
            self.codes.setflags(write=False)

    @property
    def d(self):
        return self.codes.shape[1]

    def fix(self):
        self.fixed = True
        self.codes.setflags(write=False)
        return self


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_vae(path, p: VaeParams):
    nn.save_checkpoint(path, "vae", p.cfg.to_arch(), p.params())


def load_vae(path) -> VaeParams:
    arch, arrays, _ = nn.load_checkpoint(path, expect_kind="vae")
    p = init_vae(VaeConfig.from_arch(arch), np.random.default_rng(0))
    nn.restore_params(p.params(), arrays)
    return p
