"""Synthetic perturbation worlds with planted regulatory ground truth.

Each gene owns a DNA window (``n_bins x d_dna``). A handful of causal bins
carry a world-wide motif signature plus a code vector encoding the gene's
unit-norm mixture over a few regulatory programs. Knocking a gene down moves
its own mRNA by ``-knockdown`` and every other gene by ``-knockdown * G[:, t]``
(one linear propagation step), where ``G[:, t]`` is the mixture applied to the
program loadings. Each protein is translated from one source
gene; a chosen fraction of proteins respond with the opposite sign.

Because the downstream program of a held-out target is readable only from
its causal bins, predicting it requires attending to them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import write_contacts, write_mask, write_pairs, write_peaks


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_genes: int = 50
    n_prot: int = 16
    n_expressed_prot: int = 8
    n_bins: int = 64
    d_dna: int = 48
    causal_bins_per_gene: int = 3
    distractor_bins_per_gene: int = 6
    network_sparsity: float = 0.6
    signflip_fraction: float = 0.6
    noise_sd: float = 0.1
    cells_per_target: int = 6
    n_targets_train: int = 40
    n_targets_val: int = 6
    n_targets_heldout: int = 2
    n_ntc_cells: int = 64
    n_programs: int = 3
    knockdown: float = 1.0
    dna_noise_sd: float = 1.0
    motif_scale: float = 10.0
    program_scale: float = 3.0
    background_sharing: float = 0.9
    contact_elevation: float = 3.0
    contact_null_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_genes", "n_prot", "n_bins", "d_dna", "causal_bins_per_gene", "n_programs"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise GenConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("cells_per_target", "n_targets_train", "n_targets_val", "n_targets_heldout",
                     "n_ntc_cells", "n_expressed_prot"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
                raise GenConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if self.n_programs > self.d_dna:
            raise GenConfigError("n_programs must be <= d_dna for orthonormal program codes")
        if self.n_expressed_prot > self.n_prot:
            raise GenConfigError("n_expressed_prot must be <= n_prot")
        if self.causal_bins_per_gene > self.n_bins:
            raise GenConfigError("causal_bins_per_gene must be <= n_bins")
        if self.distractor_bins_per_gene < 0 or \
                self.causal_bins_per_gene + self.distractor_bins_per_gene > self.n_bins:
            raise GenConfigError("distractor_bins_per_gene must be >= 0 and fit beside the causal bins")
        if not 0.0 < self.network_sparsity < 1.0:
            raise GenConfigError(f"network_sparsity must be in (0, 1), got {self.network_sparsity}")
        if not 0.0 <= self.signflip_fraction <= 1.0:
            raise GenConfigError(f"signflip_fraction must be in [0, 1], got {self.signflip_fraction}")
        if not 0.0 <= self.background_sharing <= 1.0:
            raise GenConfigError("background_sharing must be in [0, 1]")
        if not 0.0 <= self.contact_null_fraction <= 1.0:
            raise GenConfigError("contact_null_fraction must be in [0, 1]")
        for name in ("noise_sd", "knockdown", "dna_noise_sd", "motif_scale", "program_scale"):
            if not getattr(self, name) >= 0.0:
                raise GenConfigError(f"{name} must be >= 0")
        if self.contact_elevation < 1.0:
            raise GenConfigError("contact_elevation must be >= 1")
        n_targets = self.n_targets_train + self.n_targets_val + self.n_targets_heldout
        if n_targets > self.n_genes:
            raise GenConfigError(f"need n_genes >= total targets ({n_targets})")
        if self.n_prot + self.n_targets_heldout > self.n_genes:
            raise GenConfigError("held-out targets must be drawn from genes that source no protein")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def gene_ids(n: int) -> list[str]:
    return [f"G{i:03d}" for i in range(n)]


def protein_ids(n: int) -> list[str]:
    return [f"P{i:03d}" for i in range(n)]


@dataclass
class SyntheticWorld:
    config: GenConfig
    genes: list[str]
    proteins: list[str]
    dna: np.ndarray                 # (n_genes, n_bins, d_dna)
    motif: np.ndarray               # (d_dna,) unit vector
    program_codes: np.ndarray       # (n_programs, d_dna) orthonormal rows
    program_mixing: np.ndarray      # (n_genes, n_programs) unit-norm rows
    program_of: np.ndarray          # (n_genes,) dominant program
    causal_bins: list[np.ndarray]   # per gene, sorted bin indices
    G: np.ndarray                   # (n_genes, n_genes) column t = downstream effect of t
    W: np.ndarray                   # (n_prot, n_genes) translation map
    protein_source: np.ndarray      # (n_prot,) source gene index
    flipped: np.ndarray             # (n_prot,) bool
    expressed: np.ndarray           # (n_prot,) bool
    contacts: np.ndarray            # (n_genes, n_bins)
    contact_planted: np.ndarray     # (n_genes,) bool
    promoter_bin: int
    baseline_rna: np.ndarray        # (n_genes,) NTC means
    baseline_prot: np.ndarray       # (n_prot,)
    train_targets: list[int]
    val_targets: list[int]
    heldout_targets: list[int]

    def gene_index(self, gene) -> int:
        if isinstance(gene, (int, np.integer)):
            if not 0 <= gene < len(self.genes):
                raise LookupError(f"gene index {gene} out of range")
            return int(gene)
        try:
            return self.genes.index(gene)
        except ValueError:
            raise LookupError(f"unknown gene {gene!r}") from None

    @property
    def targets(self) -> list[int]:
        return self.train_targets + self.val_targets + self.heldout_targets

    def rna_effect(self, target) -> np.ndarray:
        """Noiseless mRNA change for a knockdown of ``target``."""
        t = self.gene_index(target)
        e = np.zeros(len(self.genes))
        e[t] = 1.0
        return -self.config.knockdown * (e + self.G[:, t])

    def prot_effect(self, target) -> np.ndarray:
        return self.W @ self.rna_effect(target)

    def split_of(self, target) -> str:
        t = self.gene_index(target)
        if t in self.train_targets:
            return "train"
        if t in self.val_targets:
            return "val"
        if t in self.heldout_targets:
            return "heldout"
        return "none"


def generate_world(cfg: GenConfig) -> SyntheticWorld:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n, p, b, dd = cfg.n_genes, cfg.n_prot, cfg.n_bins, cfg.d_dna

    order = rng.permutation(n)
    protein_source = np.sort(order[:p])
    # held-out effects must be predictable, so held-out targets source no protein
    held_t = [int(x) for x in order[p:p + cfg.n_targets_heldout]]
    pool = rng.permutation(np.concatenate([order[:p], order[p + cfg.n_targets_heldout:]]))
    n_tr, n_va = cfg.n_targets_train, cfg.n_targets_val
    train_t = [int(x) for x in pool[:n_tr]]
    val_t = [int(x) for x in pool[n_tr:n_tr + n_va]]

    n_nonzero = max(1, int(round((1.0 - cfg.network_sparsity) * n)))
    P = np.zeros((n, cfg.n_programs))
    for m in range(cfg.n_programs):
        idx = rng.choice(n, size=n_nonzero, replace=False)
        P[idx, m] = rng.choice([-1.0, 1.0], size=n_nonzero) * rng.uniform(0.5, 1.5, size=n_nonzero)
    # unit-norm mixtures keep every knockdown effect at a comparable size
    mixing = rng.normal(size=(n, cfg.n_programs))
    mixing /= np.linalg.norm(mixing, axis=1, keepdims=True)
    program_of = np.argmax(np.abs(mixing), axis=1)
    G = P @ mixing.T
    np.fill_diagonal(G, 0.0)

    n_flip = int(round(cfg.signflip_fraction * p))
    flipped = np.zeros(p, dtype=bool)
    flipped[rng.choice(p, size=n_flip, replace=False)] = True
    W = np.zeros((p, n))
    mags = rng.uniform(0.5, 1.5, size=p)
    W[np.arange(p), protein_source] = np.where(flipped, -mags, mags)

    expressed = np.zeros(p, dtype=bool)
    expressed[rng.choice(p, size=cfg.n_expressed_prot, replace=False)] = True

    motif = rng.normal(size=dd)
    motif /= np.linalg.norm(motif)
    codes = np.linalg.qr(rng.normal(size=(dd, cfg.n_programs)))[0].T

    sd = cfg.dna_noise_sd
    code_of = mixing @ codes  # orthonormal codes, so each row has unit norm
    # a common background keeps gene windows from being told apart by noise alone
    shared = rng.normal(scale=sd, size=(b, dd))
    own = rng.normal(scale=sd, size=(n, b, dd))
    dna = np.sqrt(cfg.background_sharing) * shared + np.sqrt(1.0 - cfg.background_sharing) * own
    causal = []
    for g in range(n):
        bins = np.sort(rng.choice(b, size=cfg.causal_bins_per_gene, replace=False))
        causal.append(bins)
        dna[g, bins] += cfg.motif_scale * sd * motif + cfg.program_scale * sd * code_of[g]
        # motif-free bins with unrelated codes spoil any reading that pools the whole window
        if cfg.distractor_bins_per_gene:
            free = np.setdiff1d(np.arange(b), bins)
            spots = rng.choice(free, size=cfg.distractor_bins_per_gene, replace=False)
            junk = rng.normal(size=(spots.size, cfg.n_programs))
            junk /= np.linalg.norm(junk, axis=1, keepdims=True)
            dna[g, spots] += cfg.program_scale * sd * (junk @ codes)

    promoter = b // 2
    dist = np.abs(np.arange(b) - promoter)
    decay = max(b / 8.0, 1.0)
    planted = rng.random(n) >= cfg.contact_null_fraction
    contacts = np.empty((n, b))
    for g in range(n):
        prof = 100.0 * np.exp(-dist / decay) + 10.0 + rng.uniform(0.0, 10.0, size=b)
        if planted[g]:
            non = np.ones(b, dtype=bool)
            non[causal[g]] = False
            prof[causal[g]] = cfg.contact_elevation * prof[non].mean()
        contacts[g] = prof

    baseline_rna = rng.uniform(1.0, 3.0, size=n)
    baseline_prot = np.where(expressed, rng.uniform(1.0, 3.0, size=p), rng.uniform(0.0, 0.3, size=p))

    return SyntheticWorld(
        config=cfg, genes=gene_ids(n), proteins=protein_ids(p), dna=dna, motif=motif,
        program_codes=codes, program_mixing=mixing, program_of=program_of, causal_bins=causal, G=G, W=W,
        protein_source=protein_source, flipped=flipped, expressed=expressed, contacts=contacts,
        contact_planted=planted, promoter_bin=promoter, baseline_rna=baseline_rna,
        baseline_prot=baseline_prot, train_targets=train_t, val_targets=val_t, heldout_targets=held_t,
    )


@dataclass
class PerturbationSample:
    target_gene: str
    dna: np.ndarray
    x_rna: np.ndarray
    x_prot: np.ndarray
    y_rna: np.ndarray
    y_prot: np.ndarray
    cell_id: str = ""


def _target_seed(world: SyntheticWorld, t: int, seed: int):
    return np.random.default_rng([world.config.seed, int(seed), t, 0xCE11])


def sample_cells(world: SyntheticWorld, target_gene, n: int, seed: int = 0) -> list[PerturbationSample]:
    """``n`` knockdown cells for one target; noise draws keyed by (world seed, seed, target)."""
    t = world.gene_index(target_gene)
    rng = _target_seed(world, t, seed)
    sd = world.config.noise_sd
    y_rna0 = world.rna_effect(t)
    y_prot0 = world.prot_effect(t)
    ng, npr = len(world.genes), len(world.proteins)
    out = []
    for i in range(n):
        out.append(PerturbationSample(
            target_gene=world.genes[t],
            dna=world.dna[t],
            x_rna=world.baseline_rna + rng.normal(scale=sd, size=ng),
            x_prot=world.baseline_prot + rng.normal(scale=sd, size=npr),
            y_rna=y_rna0 + rng.normal(scale=sd, size=ng),
            y_prot=y_prot0 + rng.normal(scale=sd, size=npr),
            cell_id=f"{world.genes[t]}_{i:04d}",
        ))
    return out


def sample_ntc(world: SyntheticWorld, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Non-targeting control cells: (n x n_genes RNA, n x n_prot protein)."""
    rng = np.random.default_rng([world.config.seed, int(seed), 0x7C])
    sd = world.config.noise_sd
    x_rna = world.baseline_rna + rng.normal(scale=sd, size=(n, len(world.genes)))
    x_prot = world.baseline_prot + rng.normal(scale=sd, size=(n, len(world.proteins)))
    return x_rna, x_prot


def export_ground_truth(world: SyntheticWorld, directory) -> dict[str, Path]:
    """Write peaks, contacts, mask and protein/source-gene pair TSVs."""
    d = Path(directory)
    paths = {"peaks": d / "peaks.tsv", "contacts": d / "contacts.tsv", "mask": d / "mask.tsv",
             "pairs": d / "pairs.tsv"}
    write_peaks(paths["peaks"], dict(zip(world.genes, world.causal_bins)))
    write_contacts(paths["contacts"], dict(zip(world.genes, world.contacts)))
    write_mask(paths["mask"], world.proteins, world.expressed)
    write_pairs(paths["pairs"], [(pid, world.genes[s]) for pid, s in zip(world.proteins, world.protein_source)])
    return paths
