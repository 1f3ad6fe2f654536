"""In-silico side-effect profiling from protein-output/RNA-input Jacobians."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .metrics import UndefinedCorrelationError, pearson, spearman
from .model import (
    ModelState,
    ParamLeaves,
    checkpoint_bytes,
    forward_graph,
    full_forward,
)

RNA_LEAF = "input.x_rna"


@dataclass
class Cell:
    """Minimal model input for profiling; perturbation samples also qualify."""

    x_rna: np.ndarray
    x_prot: np.ndarray


def ntc_pseudo_cell(ntc_rna, ntc_prot) -> Cell:
    """One pseudo-cell at the mean of the non-targeting control cells."""
    return Cell(np.asarray(ntc_rna, dtype=np.float64).mean(axis=0),
                np.asarray(ntc_prot, dtype=np.float64).mean(axis=0))


def checkpoint_id(state: ModelState) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()[:16]


@dataclass
class GradientProfile:
    descriptor: str
    matrix: np.ndarray          # (n_prot, n_genes), d y_hat_prot[j] / d x_rna[g]
    checkpoint: str
    n_cells: int
    genes: np.ndarray           # column gene indices

    def column(self, gene_index: int) -> np.ndarray:
        hits = np.flatnonzero(self.genes == gene_index)
        if hits.size == 0:
            raise KeyError(f"gene index {gene_index} not in profile")
        return self.matrix[:, hits[0]]


def cell_jacobian(state: ModelState, cell, dna, dtype=None) -> np.ndarray:
    """Full (n_prot, n_genes) Jacobian of one cell, one backward pass per protein."""
    dtype = dtype or next(iter(state.params.values())).dtype
    g = ad.Graph(training=False, dtype=dtype)
    x = g.leaf(RNA_LEAF, cell.x_rna)
    out, _ = forward_graph(ParamLeaves(g, state.params), state.config, dna, x, cell.x_prot)
    y = out["y_hat_prot"]
    n_prot = y.data.shape[0]
    jac = np.empty((n_prot, x.data.shape[0]), dtype=np.float64)
    onehot = np.zeros(n_prot)
    for j in range(n_prot):
        onehot[:] = 0.0
        onehot[j] = 1.0
        jac[j] = ad.backward(g, y, wrt=[RNA_LEAF], grad_output=onehot)[RNA_LEAF]
    return jac


def gradient_profile(state: ModelState, cells: Sequence, dna_embedding, gene_subset=None,
                     descriptor: str = "", dtype=None) -> GradientProfile:
    """Mean over ``cells`` of the protein/RNA-input Jacobian, dropout off."""
    if dna_embedding is None:
        raise ValueError("DNA embedding required for gradient profiling")
    if not state.has_vce_c:
        raise ValueError("model has no protein stage")
    if len(cells) == 0:
        raise ValueError("no cells to profile")
    acc = None
    for c in cells:
        jac = cell_jacobian(state, c, dna_embedding, dtype)
        acc = jac if acc is None else acc + jac
    mean = acc / len(cells)
    genes = np.arange(mean.shape[1]) if gene_subset is None else np.asarray(gene_subset, dtype=np.int64)
    return GradientProfile(descriptor, mean[:, genes], checkpoint_id(state), len(cells), genes)


# ------------------------------------------------------------------ rankings


@dataclass
class SideEffectRow:
    rank: int
    protein: str
    effect: float
    direction: str


@dataclass
class SideEffectTable:
    rows: list[SideEffectRow]


def _direction(v: float) -> str:
    return "up" if v > 0 else "down" if v < 0 else "none"


def side_effect_ranking(effects, protein_ids: Sequence[str], mask=None, top_n: int | None = None) -> SideEffectTable:
    """Masked-in proteins ordered by |effect| descending, ties by protein id."""
    e = np.asarray(effects, dtype=np.float64).ravel()
    if len(protein_ids) != e.size:
        raise ValueError("protein ids and effects differ in length")
    keep = np.ones(e.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != e.shape:
        raise ValueError("mask length does not match effects")
    items = sorted((-abs(e[i]), protein_ids[i], e[i]) for i in np.flatnonzero(keep))
    if top_n is not None:
        items = items[:top_n]
    return SideEffectTable([SideEffectRow(r + 1, pid, float(v), _direction(v))
                            for r, (_, pid, v) in enumerate(items)])


@dataclass
class DirectDelta:
    target_gene: str
    delta: np.ndarray
    ntc_mean_prot: np.ndarray | None
    n_cells: int


def direct_prediction_delta(state: ModelState, perturbed_cells: Sequence, ntc_mean_prot=None) -> DirectDelta:
    """Mean predicted protein delta over cells sharing one target gene."""
    if not perturbed_cells:
        raise ValueError("no perturbed cells")
    targets = {c.target_gene for c in perturbed_cells}
    if len(targets) != 1:
        raise ValueError(f"cells span several targets: {sorted(targets)}")
    preds = np.array([full_forward(state, c).y_hat_prot for c in perturbed_cells], dtype=np.float64)
    ntc = None if ntc_mean_prot is None else np.asarray(ntc_mean_prot, dtype=np.float64)
    return DirectDelta(targets.pop(), preds.mean(axis=0), ntc, len(perturbed_cells))


# --------------------------------------------------------------- concordance


@dataclass
class Concordance:
    pearson_all: float
    spearman_all: float
    direction_pct_all: float
    pearson_masked: float
    spearman_masked: float
    direction_pct_masked: float
    top_n_direction_pct: float
    n_masked: int
    top_n: int


def _sign_agreement_pct(a, b) -> float:
    if a.size == 0:
        return float("nan")
    agree = (np.sign(a) == np.sign(b)) & (a != 0) & (b != 0)
    return 100.0 * agree.sum() / a.size


def _safe(fn, a, b) -> float:
    try:
        return fn(a, b)
    except (UndefinedCorrelationError, ValueError):
        return float("nan")


def gradient_concordance(profile_a: GradientProfile, profile_b: GradientProfile, target_gene: int,
                         mask=None, top_n: int = 10) -> Concordance:
    """Agreement of two profiles on the target gene's column."""
    if profile_a.matrix.shape != profile_b.matrix.shape:
        raise ValueError(f"profile shapes differ: {profile_a.matrix.shape} vs {profile_b.matrix.shape}")
    a = profile_a.column(target_gene)
    b = profile_b.column(target_gene)
    m = np.ones(a.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError("mask length does not match profile rows")
    am, bm = a[m], b[m]
    n_top = min(top_n, am.size)
    top = np.lexsort((np.arange(am.size), -np.abs(am)))[:n_top]
    return Concordance(
        pearson_all=_safe(pearson, a, b), spearman_all=_safe(spearman, a, b),
        direction_pct_all=_sign_agreement_pct(a, b),
        pearson_masked=_safe(pearson, am, bm), spearman_masked=_safe(spearman, am, bm),
        direction_pct_masked=_sign_agreement_pct(am, bm),
        top_n_direction_pct=_sign_agreement_pct(am[top], bm[top]),
        n_masked=int(m.sum()), top_n=n_top,
    )
