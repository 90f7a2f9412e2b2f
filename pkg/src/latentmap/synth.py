"""Ground-truth synthetic corpus: paired expression-only and spatial data.

Cells and spots share per-type Poisson rate profiles on the shared gene
panel, which makes the pipeline's core assumption (same expression
distribution for the same cell type on the shared genes) true by
construction. Spots live on a grid partitioned into typed regions
(quadrants or horizontal stripes), and the region map is kept so inferred
coordinates can be scored against the truth.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .preprocess import CountMatrix, SpatialDataset

# subkeys for deriving independent streams from one corpus seed
_PROFILE_STREAM = 0
_SC_STREAM = 1
_ST_STREAM = 2
_QUERY_STREAM = 3

RATE_FLOOR = 0.5  # keeps every gene comfortably above the QC thresholds


@dataclass
class SynthConfig:
    n_cells: int = 1000
    n_genes: int = 2000
    n_shared: int = 500
    n_types: int = 4
    grid_side: int = 16
    noise: float = 0.3
    layout: str = "quadrants"  # quadrants | stripes
    seed: int = 0

    def __post_init__(self):
        if self.n_shared > self.n_genes:
            raise DataError("n_shared cannot exceed n_genes")
        if self.n_types < 1 or self.n_cells < 1 or self.grid_side < 2:
            raise DataError("counts must be positive (grid_side >= 2)")
        if self.layout not in ("quadrants", "stripes"):
            raise DataError(f"unknown layout {self.layout!r}")
        if self.layout == "quadrants" and self.n_types > 4:
            raise DataError("quadrant layout supports at most 4 types (use stripes)")
        if self.n_types > self.n_spots:
            raise DataError("more types than spots")

    @property
    def n_spots(self):
        return self.grid_side ** 2


@dataclass
class TypeProfiles:
    """Per-type Poisson rates per gene, plus the shared-gene index set."""

    rates: np.ndarray  # [n_types, n_genes]
    gene_ids: list
    shared_idx: np.ndarray  # sorted indices into gene_ids

    @property
    def shared_gene_ids(self):
        return [self.gene_ids[i] for i in self.shared_idx]


@dataclass
class Region:
    label: str
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, x, y):
        return self.xmin <= x < self.xmax and self.ymin <= y < self.ymax


def _rng(cfg, stream):
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, stream)))


def make_profiles(cfg: SynthConfig) -> TypeProfiles:
    rng = _rng(cfg, _PROFILE_STREAM)
    rates = np.maximum(np.exp(rng.normal(0.0, 1.0, size=(cfg.n_types, cfg.n_genes))),
                       RATE_FLOOR)
    shared_idx = np.sort(rng.choice(cfg.n_genes, size=cfg.n_shared, replace=False))
    gene_ids = [f"G{j:05d}" for j in range(cfg.n_genes)]
    return TypeProfiles(rates=rates, gene_ids=gene_ids, shared_idx=shared_idx)


def _noisy_counts(rng, rates, noise):
    """Poisson draws around the profile; lognormal jitter adds overdispersion.

    The -noise^2/2 shift keeps the jitter's mean at 1 so the expected rate
    stays equal to the profile.
    """
    if noise > 0:
        jitter = np.exp(noise * rng.normal(size=rates.shape) - 0.5 * noise ** 2)
        rates = rates * jitter
    return rng.poisson(rates).astype(np.int64)


def _type_labels(cfg, n):
    return [f"type{i % cfg.n_types}" for i in range(n)]


def gen_sc(cfg: SynthConfig, profiles: TypeProfiles = None):
    """(counts [n_cells, n_genes], labels, profiles) for the expression-only side."""
    if profiles is None:
        profiles = make_profiles(cfg)
    rng = _rng(cfg, _SC_STREAM)
    labels = _type_labels(cfg, cfg.n_cells)
    type_idx = np.array([int(lab[4:]) for lab in labels])
    counts = _noisy_counts(rng, profiles.rates[type_idx], cfg.noise)
    cells = [f"C{i:05d}" for i in range(cfg.n_cells)]
    return CountMatrix(cells, profiles.gene_ids, counts), labels, profiles


def gen_sc_query(cfg: SynthConfig, profiles: TypeProfiles, n_query: int):
    """Fresh held-out cells from the same type profiles (full gene set)."""
    rng = _rng(cfg, _QUERY_STREAM)
    labels = _type_labels(cfg, n_query)
    type_idx = np.array([int(lab[4:]) for lab in labels])
    counts = _noisy_counts(rng, profiles.rates[type_idx], cfg.noise)
    cells = [f"Q{i:05d}" for i in range(n_query)]
    return CountMatrix(cells, profiles.gene_ids, counts), labels


def _grid_coords(side):
    return np.array([[float(x), float(y)] for y in range(side) for x in range(side)])


def spot_type_assignment(cfg: SynthConfig):
    """(type index per spot, region list) for the configured layout."""
    side = cfg.grid_side
    coords = _grid_coords(side)
    mid = side / 2.0 - 0.5  # boundary between grid halves
    regions = []
    types = np.zeros(cfg.n_spots, dtype=int)
    if cfg.layout == "quadrants":
        for q in range(4):
            right = q % 2 == 1
            top = q // 2 == 1
            xmin, xmax = (mid, side - 0.5) if right else (-0.5, mid)
            ymin, ymax = (mid, side - 0.5) if top else (-0.5, mid)
            label = f"type{q % cfg.n_types}"
            regions.append(Region(label, xmin, xmax, ymin, ymax))
        q_of = (coords[:, 0] > mid).astype(int) + 2 * (coords[:, 1] > mid).astype(int)
        types = q_of % cfg.n_types
    else:  # stripes
        band_height = side / cfg.n_types
        for b in range(cfg.n_types):
            regions.append(Region(f"type{b}", -0.5, side - 0.5,
                                  b * band_height - 0.5, (b + 1) * band_height - 0.5))
        types = np.minimum((coords[:, 1] + 0.5) // band_height, cfg.n_types - 1).astype(int)
    return types, regions, coords


def gen_st(cfg: SynthConfig, profiles: TypeProfiles):
    """(SpatialDataset on the shared panel, labels, regions)."""
    rng = _rng(cfg, _ST_STREAM)
    types, regions, coords = spot_type_assignment(cfg)
    shared_rates = profiles.rates[:, profiles.shared_idx]
    counts = _noisy_counts(rng, shared_rates[types], cfg.noise)
    spots = [f"S{i:05d}" for i in range(cfg.n_spots)]
    matrix = CountMatrix(spots, profiles.shared_gene_ids, counts)
    labels = [f"type{t}" for t in types]
    return SpatialDataset(matrix, coords), labels, regions


def point_in_regions(regions, label, x, y):
    """True when (x, y) falls inside any region carrying ``label``."""
    return any(r.contains(x, y) for r in regions if r.label == label)


def two_block_spatial_fixture(side: int = 7, n_genes: int = 12, gradient: float = 1.0,
                              noise: float = 0.1, gap: float = 20.0, seed: int = 0):
    """Two grid blocks with block profiles plus a spatial expression gradient.

    Returns (coords [2*side^2, 2], expression [2*side^2, n_genes], block
    labels). The gradient term makes within-block position visible in the
    expression, the way real tissue carries smooth spatial programs; without
    it, link prediction on the spot graph has nothing to generalize from.
    """
    rng = np.random.default_rng(seed)
    grid = _grid_coords(side)
    coords = np.vstack([grid, grid + [gap, 0.0]])
    n_half = side * side
    block = np.repeat([0, 1], n_half)
    profile = rng.normal(size=(2, n_genes))
    local = coords.copy()
    local[n_half:, 0] -= gap
    local = (local - local.mean(axis=0)) / local.std(axis=0)
    expr = profile[block] + gradient * (local @ rng.normal(size=(2, n_genes)))
    expr += noise * rng.normal(size=(2 * n_half, n_genes))
    return coords, expr, block
