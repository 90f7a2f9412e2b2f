"""Spatial kNN graph construction and the variational graph autoencoder.

The encoder runs two branches over the spot expression matrix: a plain MLP
and a 2-layer graph convolution stack over the normalized adjacency. Their
outputs (each d/2 wide) are concatenated and merged into a single d-wide
latent by a fully connected layer, on which the mu/logvar heads sit. The
decoder reconstructs expression (MLP), coordinates (MLP to 2-D, in the
normalized coordinate frame), and the adjacency via an inner-product head
sigmoid(z z^T).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .errors import DataError, ShapeError


# ---------------------------------------------------------------------------
# spatial graph
# ---------------------------------------------------------------------------

@dataclass
class SpatialGraph:
    """Symmetric edge set without self-loops plus the GCN-normalized adjacency."""

    n: int
    edges: list  # [(i, j) with i < j]
    norm_adj: np.ndarray

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a


def build_knn_graph(coords, k: int = 6) -> SpatialGraph:
    """Union-symmetrized k-nearest-neighbor graph over 2-D points.

    Distance ties break toward the smaller point index; self-loops are
    excluded from the edge set (normalization adds them back internally).
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n <= k:
        raise DataError(f"need more points than neighbors: n={n}, k={k}")
    if not np.all(np.isfinite(coords)):
        raise DataError("coordinates must be finite")
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    edges = set()
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, dist[i]))  # distance, then smaller index
        for j in order[:k]:
            a, b = (i, int(j)) if i < j else (int(j), i)
            edges.add((a, b))
    graph = SpatialGraph(n=n, edges=sorted(edges), norm_adj=np.empty((0, 0)))
    graph.norm_adj = normalize_adjacency(graph)
    return graph


def normalize_adjacency(g: SpatialGraph) -> np.ndarray:
    """Symmetric GCN normalization: D^{-1/2} (A + I) D^{-1/2}."""
    a = g.adjacency()
    if not np.array_equal(a, a.T):
        raise DataError("adjacency must be symmetric")
    a_hat = a + np.eye(g.n)
    deg = a_hat.sum(axis=1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)  # >= 1 via the self-loop, never zero
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def gcn_layer(norm_adj, h, w, activation: bool = True):
    """One graph convolution: relu(A_hat @ h @ w); final layers pass linear."""
    norm_adj = norm_adj if isinstance(norm_adj, ad.Tensor) else ad.tensor(norm_adj)
    out = ad.matmul(ad.matmul(norm_adj, h), w)
    return ad.relu(out) if activation else out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class VgaeConfig:
    n_genes: int = 500
    latent_dim: int = 10
    exp_hidden: tuple = (128, 64)
    gcn_hidden: int = 64
    dec_hidden: tuple = (64, 128)
    coord_hidden: tuple = (64, 32)

    def __post_init__(self):
        if self.latent_dim % 2 != 0:
            raise DataError("latent_dim must be even (split across the two encoder branches)")

    @property
    def d_half(self):
        return self.latent_dim // 2

    def to_arch(self):
        return {"n_genes": self.n_genes, "latent_dim": self.latent_dim,
                "exp_hidden": list(self.exp_hidden), "gcn_hidden": self.gcn_hidden,
                "dec_hidden": list(self.dec_hidden), "coord_hidden": list(self.coord_hidden)}

    @staticmethod
    def from_arch(arch):
        return VgaeConfig(n_genes=int(arch["n_genes"]), latent_dim=int(arch["latent_dim"]),
                          exp_hidden=tuple(arch["exp_hidden"]), gcn_hidden=int(arch["gcn_hidden"]),
                          dec_hidden=tuple(arch["dec_hidden"]),
                          coord_hidden=tuple(arch["coord_hidden"]))


class VgaeParams:
    def __init__(self, cfg: VgaeConfig, rng):
        self.cfg = cfg
        ew = [cfg.n_genes] + list(cfg.exp_hidden) + [cfg.d_half]
        self.exp_enc = [nn.init_dense(rng, ew[i], ew[i + 1]) for i in range(len(ew) - 1)]
        self.gcn_w1 = ad.tensor(rng.normal(0.0, np.sqrt(2.0 / cfg.n_genes),
                                           size=(cfg.n_genes, cfg.gcn_hidden)), requires_grad=True)
        self.gcn_w2 = ad.tensor(rng.normal(0.0, np.sqrt(1.0 / cfg.gcn_hidden),
                                           size=(cfg.gcn_hidden, cfg.d_half)), requires_grad=True)
        self.merge = nn.init_dense(rng, 2 * cfg.d_half, cfg.latent_dim, gain=1.0)
        self.mu_head = nn.init_dense(rng, cfg.latent_dim, cfg.latent_dim, gain=1.0)
        self.logvar_head = nn.init_dense(rng, cfg.latent_dim, cfg.latent_dim, gain=1.0)
        dw = [cfg.latent_dim] + list(cfg.dec_hidden)
        self.dec = [nn.init_dense(rng, dw[i], dw[i + 1]) for i in range(len(dw) - 1)]
        self.out_head = nn.init_dense(rng, dw[-1], cfg.n_genes, gain=1.0)
        cw = [cfg.latent_dim] + list(cfg.coord_hidden)
        self.coord = [nn.init_dense(rng, cw[i], cw[i + 1]) for i in range(len(cw) - 1)]
        self.coord_head = nn.init_dense(rng, cw[-1], 2, gain=1.0)

    def params(self):
        named = [(f"exp{i}", l) for i, l in enumerate(self.exp_enc)]
        named += [("merge", self.merge), ("mu", self.mu_head), ("logvar", self.logvar_head)]
        named += [(f"dec{i}", l) for i, l in enumerate(self.dec)]
        named += [("out", self.out_head)]
        named += [(f"coord{i}", l) for i, l in enumerate(self.coord)]
        named += [("coord_head", self.coord_head)]
        out = nn.collect_params(named)
        out["gcn.w1"] = self.gcn_w1
        out["gcn.w2"] = self.gcn_w2
        return out


def init_vgae(cfg: VgaeConfig, seed_or_rng) -> VgaeParams:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    return VgaeParams(cfg, rng)


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.tensor(np.asarray(x, dtype=np.float64))


def vgae_encode(p: VgaeParams, norm_adj, x_exp):
    """(mu, logvar) of the merged latent, each [n, d].

    Expression branch: MLP(x) -> d/2. Graph branch: two GCN layers over the
    normalized adjacency -> d/2. Concatenate, merge with a fully connected
    layer, then apply the posterior heads.
    """
    x = _as_tensor(x_exp)
    if x.shape[1] != p.cfg.n_genes:
        raise ShapeError(f"vgae_encode: input has {x.shape[1]} genes, model expects {p.cfg.n_genes}")
    norm_adj = _as_tensor(norm_adj)
    if norm_adj.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"vgae_encode: adjacency {tuple(norm_adj.shape)} vs {x.shape[0]} spots")
    h = x
    for layer in p.exp_enc[:-1]:
        h = ad.relu(layer(h))
    z_exp = p.exp_enc[-1](h)
    g1 = gcn_layer(norm_adj, x, p.gcn_w1, activation=True)
    z_graph = gcn_layer(norm_adj, g1, p.gcn_w2, activation=False)
    merged = p.merge(ad.concat_cols(z_exp, z_graph))
    return p.mu_head(merged), p.logvar_head(merged)


def vgae_decode(p: VgaeParams, z):
    """(expression [n, g], coordinates [n, 2], adjacency logits [n, n]).

    Coordinates come out in the model's normalized frame (zero mean, unit
    RMS over the training spots). Adjacency logits are the inner products
    z z^T; probabilities are their sigmoid.
    """
    z = _as_tensor(z)
    if z.shape[1] != p.cfg.latent_dim:
        raise ShapeError(f"vgae_decode: input width {z.shape[1]}, model expects {p.cfg.latent_dim}")
    h = z
    for layer in p.dec:
        h = ad.relu(layer(h))
    x_hat = p.out_head(h)
    c = z
    for layer in p.coord:
        c = ad.relu(layer(c))
    coords_hat = p.coord_head(c)
    adj_logits = ad.matmul(z, ad.transpose(z))
    return x_hat, coords_hat, adj_logits


def positive_pairs(g: SpatialGraph):
    """Entries of A + I that are 1, as (rows, cols) over the upper triangle."""
    rows = [i for i in range(g.n)] + [i for i, _ in g.edges]
    cols = [i for i in range(g.n)] + [j for _, j in g.edges]
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


def negative_candidates(g: SpatialGraph):
    """All upper-triangle non-edges of A + I, as an [m, 2] index array."""
    a_hat = g.adjacency() + np.eye(g.n)
    iu = np.triu_indices(g.n, k=1)
    mask = a_hat[iu] == 0
    return np.stack([iu[0][mask], iu[1][mask]], axis=1)


def sample_negatives(candidates, count, rng):
    count = min(count, len(candidates))
    pick = rng.choice(len(candidates), size=count, replace=False)
    pick.sort()
    return candidates[pick]


@dataclass
class VgaeLossWeights:
    recon_exp: float = 1.0
    recon_sp: float = 1.0
    recon_adj: float = 1.0
    kl: float = 1.0


def vgae_loss(p: VgaeParams, graph: SpatialGraph, x_exp, x_sp, noise,
              weights: VgaeLossWeights, rng):
    """(total, recon_exp, recon_sp, recon_adj, kl) as scalar tensors.

    Adjacency reconstruction scores the positive entries of A + I against an
    equal number of sampled non-edges (class balance); ``rng`` drives the
    per-call negative sample.
    """
    from .vae import kl_divergence, mse, reparameterize  # shared math

    x_exp = _as_tensor(x_exp)
    x_sp = _as_tensor(x_sp)
    mu, logvar = vgae_encode(p, graph.norm_adj, x_exp)
    z = reparameterize(mu, logvar, noise)
    x_hat, coords_hat, adj_logits = vgae_decode(p, z)

    recon_exp = mse(x_hat, x_exp)
    recon_sp = mse(coords_hat, x_sp)

    pos_r, pos_c = positive_pairs(graph)
    neg = sample_negatives(negative_candidates(graph), len(pos_r), rng)
    rows = np.concatenate([pos_r, neg[:, 0]])
    cols = np.concatenate([pos_c, neg[:, 1]])
    labels = np.concatenate([np.ones(len(pos_r)), np.zeros(len(neg))])
    recon_adj = ad.bce_with_logits(ad.gather_pairs(adj_logits, rows, cols), labels)

    kl = kl_divergence(mu, logvar)
    total = ad.add(ad.add(ad.scale(recon_exp, weights.recon_exp),
                          ad.scale(recon_sp, weights.recon_sp)),
                   ad.add(ad.scale(recon_adj, weights.recon_adj),
                          ad.scale(kl, weights.kl)))
    return total, recon_exp, recon_sp, recon_adj, kl


def encode_mu(p: VgaeParams, norm_adj, x_exp) -> np.ndarray:
    mu, _ = vgae_encode(p, norm_adj, ad.tensor(np.asarray(x_exp, dtype=np.float64)))
    return mu.data.copy()


def edge_auc(z: np.ndarray, pos_pairs, neg_pairs) -> float:
    """Rank-based AUC of inner-product edge scores: positives vs negatives."""
    z = np.asarray(z, dtype=np.float64)
    pos_pairs = np.asarray(pos_pairs)
    neg_pairs = np.asarray(neg_pairs)
    pos = (z[pos_pairs[:, 0]] * z[pos_pairs[:, 1]]).sum(axis=1)
    neg = (z[neg_pairs[:, 0]] * z[neg_pairs[:, 1]]).sum(axis=1)
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# coordinate normalization
# ---------------------------------------------------------------------------

@dataclass
class CoordTransform:
    """Zero-mean, unit-RMS normalization of the training spot coordinates."""

    center: np.ndarray
    scale: float

    def normalize(self, coords):
        return (np.asarray(coords, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, coords):
        return np.asarray(coords, dtype=np.float64) * self.scale + self.center

    def to_dict(self):
        return {"center": [float(v) for v in self.center], "scale": float(self.scale)}

    @staticmethod
    def from_dict(d):
        return CoordTransform(center=np.asarray(d["center"], dtype=np.float64),
                              scale=float(d["scale"]))


def fit_coord_transform(coords) -> CoordTransform:
    coords = np.asarray(coords, dtype=np.float64)
    center = coords.mean(axis=0)
    rms = float(np.sqrt(np.mean(((coords - center) ** 2).sum(axis=1))))
    if rms == 0.0:
        rms = 1.0  # all spots coincide; keep the transform invertible
    return CoordTransform(center=center, scale=rms)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_vgae(path, p: VgaeParams, extra=None):
    nn.save_checkpoint(path, "vgae", p.cfg.to_arch(), p.params(), extra=extra)


def load_vgae(path):
    arch, arrays, extra = nn.load_checkpoint(path, expect_kind="vgae")
    p = init_vgae(VgaeConfig.from_arch(arch), np.random.default_rng(0))
    nn.restore_params(p.params(), arrays)
    return p, extra
