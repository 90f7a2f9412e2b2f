"""Binary classifier over latent codes, driving the adversarial alignment.

Architecture: 3 hidden linear layers of 128 units with ReLU, then a single
logit. Trained with binary cross entropy on logits and Adam. Cells (the
expression-only dataset) carry label 1, spots label 0.
"""

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .errors import ShapeError


class DiscriminatorParams:
    def __init__(self, latent_dim, rng, hidden=(128, 128, 128)):
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        widths = [latent_dim] + list(hidden)
        self.layers = [nn.init_dense(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        self.head = nn.init_dense(rng, widths[-1], 1, gain=1.0)

    def params(self):
        named = [(f"h{i}", l) for i, l in enumerate(self.layers)] + [("head", self.head)]
        return nn.collect_params(named)


def init_discriminator(latent_dim, seed_or_rng, hidden=(128, 128, 128)) -> DiscriminatorParams:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    return DiscriminatorParams(latent_dim, rng, hidden=hidden)


def disc_forward(p: DiscriminatorParams, z):
    """Logits [n] for latent codes z [n, d]."""
    z = z if isinstance(z, ad.Tensor) else ad.tensor(np.asarray(z, dtype=np.float64))
    if z.shape[1] != p.latent_dim:
        raise ShapeError(f"disc_forward: input width {z.shape[1]}, model expects {p.latent_dim}")
    h = z
    for layer in p.layers:
        h = ad.relu(layer(h))
    return ad.sum_cols(p.head(h))  # [n, 1] -> [n]


def disc_accuracy(p: DiscriminatorParams, z_sc, z_st) -> float:
    """Fraction correctly classified; cells are class 1, spots class 0.

    Predict class 1 iff logit > 0, so a zero logit deterministically means
    class 0.
    """
    logits_sc = disc_forward(p, np.asarray(z_sc, dtype=np.float64)).data
    logits_st = disc_forward(p, np.asarray(z_st, dtype=np.float64)).data
    correct = int((logits_sc > 0).sum()) + int((logits_st <= 0).sum())
    return correct / (logits_sc.size + logits_st.size)


def train_discriminator(p: DiscriminatorParams, z_sc, z_st,
                        alpha: float = 0.9, max_iters: int = 50, lr: float = 1e-3):
    """Full-batch Adam on BCE until accuracy >= alpha or ``max_iters`` steps.

    The latents are treated as constants (no gradient reaches whatever
    produced them). Returns (params, final_accuracy, steps_taken).
    """
    z_sc = np.asarray(z_sc, dtype=np.float64)
    z_st = np.asarray(z_st, dtype=np.float64)
    z_all = ad.tensor(np.vstack([z_sc, z_st]))
    labels = np.concatenate([np.ones(len(z_sc)), np.zeros(len(z_st))])
    opt = ad.Adam(p.params(), lr=lr)
    steps = 0
    acc = disc_accuracy(p, z_sc, z_st)
    while acc < alpha and steps < max_iters:
        opt.zero_grad()
        with ad.Tape():
            loss = ad.bce_with_logits(disc_forward(p, z_all), labels)
            ad.backward(loss)
        opt.step()
        steps += 1
        acc = disc_accuracy(p, z_sc, z_st)
    return p, acc, steps


def adversarial_generator_loss(p: DiscriminatorParams, z, target_label: float = 1.0):
    """BCE of the discriminator's output against a flipped label.

    Non-saturating generator objective: gradients flow through the
    discriminator into ``z`` (and from there into the encoder that produced
    it); the discriminator's own parameters are not stepped here.
    """
    logits = disc_forward(p, z)
    labels = np.full(logits.shape, float(target_label))
    return ad.bce_with_logits(logits, labels)


def save_discriminator(path, p: DiscriminatorParams):
    arch = {"latent_dim": p.latent_dim, "hidden": list(p.hidden)}
    nn.save_checkpoint(path, "discriminator", arch, p.params())


def load_discriminator(path) -> DiscriminatorParams:
    arch, arrays, _ = nn.load_checkpoint(path, expect_kind="discriminator")
    p = init_discriminator(int(arch["latent_dim"]), np.random.default_rng(0),
                           hidden=tuple(arch["hidden"]))
    nn.restore_params(p.params(), arrays)
    return p
