"""Correlation metrics, direction agreement and mRNA/protein divergence tables."""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelationError(ValueError):
    """Raised when either vector has zero variance."""


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance; correlation undefined")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    return pearson(rankdata(np.asarray(x, dtype=np.float64).ravel()),
                   rankdata(np.asarray(y, dtype=np.float64).ravel()))


def per_gene_mean_r(preds, targets, groups, columns=None) -> dict[str, float]:
    """Pseudo-bulk r per group: correlate the group's mean prediction with its mean target.

    ``columns`` (bool mask or index array) restricts the compared entries,
    e.g. to expressed proteins.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    groups = list(groups)
    if preds.shape != targets.shape or preds.shape[0] != len(groups):
        raise ValueError("preds, targets and groups must align on the cell axis")
    if columns is not None:
        preds, targets = preds[:, columns], targets[:, columns]
    out: dict[str, float] = {}
    labels = np.asarray(groups, dtype=object)
    for g in dict.fromkeys(groups):
        rows = labels == g
        out[g] = pearson(preds[rows].mean(axis=0), targets[rows].mean(axis=0))
    return out


def per_cell_mean_r(preds, targets, groups, columns=None) -> dict[str, float]:
    """Mean over a group's cells of the per-cell r; cells with zero variance are skipped."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if columns is not None:
        preds, targets = preds[:, columns], targets[:, columns]
    labels = np.asarray(list(groups), dtype=object)
    out = {}
    for g in dict.fromkeys(labels.tolist()):
        rs = []
        for i in np.flatnonzero(labels == g):
            try:
                rs.append(pearson(preds[i], targets[i]))
            except UndefinedCorrelationError:
                warnings.warn(f"cell {i} of group {g!r} has zero variance; skipped", RuntimeWarning, stacklevel=2)
        out[g] = float(np.mean(rs)) if rs else math.nan
    return out


def direction_agreement(pred_delta, actual_delta, min_effect: float = 0.1) -> tuple[int, int]:
    """Count entries with ``|actual| > min_effect`` and those whose signs match.

    A predicted delta of exactly zero never agrees.
    """
    p = np.asarray(pred_delta, dtype=np.float64).ravel()
    a = np.asarray(actual_delta, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} vs {a.size}")
    keep = np.abs(a) > min_effect
    agree = (np.sign(p[keep]) == np.sign(a[keep])) & (p[keep] != 0.0)
    return int(keep.sum()), int(agree.sum())


@dataclass
class DivergenceRow:
    threshold: float
    n_genes: int
    n_opposite: int
    n_same: int

    @property
    def pct_opposite(self) -> float:
        return 100.0 * self.n_opposite / self.n_genes if self.n_genes else math.nan


@dataclass
class DivergenceTable:
    rows: list[DivergenceRow] = field(default_factory=list)


def divergence_sensitivity(mrna_lfc: Mapping[str, float], prot_delta: Mapping[str, float],
                           matched_pairs: Sequence[tuple[str, str]],
                           thresholds=(0.0, 0.005, 0.01, 0.02, 0.05)) -> DivergenceTable:
    """Opposite- vs same-direction counts of matched gene/protein pairs per |LFC| threshold."""
    if not matched_pairs:
        raise ValueError("no matched gene/protein pairs")
    pairs = [(float(mrna_lfc[g]), float(prot_delta[p])) for g, p in matched_pairs]
    table = DivergenceTable()
    for t in sorted(thresholds):
        kept = [(m, d) for m, d in pairs if abs(m) > t and d != 0.0]
        opp = sum(1 for m, d in kept if np.sign(m) != np.sign(d))
        table.rows.append(DivergenceRow(float(t), len(kept), opp, len(kept) - opp))
    return table


@dataclass
class GeneEval:
    gene: str
    rna_r: float
    prot_r: float
    cell_r: float
    n_cells: int


@dataclass
class EvalReport:
    genes: list[GeneEval]

    @property
    def mean_rna_r(self) -> float:
        return float(np.mean([g.rna_r for g in self.genes]))

    @property
    def mean_prot_r(self) -> float:
        return float(np.mean([g.prot_r for g in self.genes]))

    @property
    def mean_cell_r(self) -> float:
        return float(np.mean([g.cell_r for g in self.genes]))


def evaluate(pred_rna, pred_prot, samples, mask) -> EvalReport:
    """Per-held-out-gene pseudo-bulk RNA/protein r and per-cell RNA r."""
    groups = [s.target_gene for s in samples]
    y_rna = np.array([s.y_rna for s in samples])
    y_prot = np.array([s.y_prot for s in samples])
    mask = np.asarray(mask, dtype=bool)
    rna = per_gene_mean_r(pred_rna, y_rna, groups)
    prot = per_gene_mean_r(pred_prot, y_prot, groups, columns=mask)
    cell = per_cell_mean_r(pred_rna, y_rna, groups)
    counts = {g: groups.count(g) for g in rna}
    return EvalReport([GeneEval(g, rna[g], prot[g], cell[g], counts[g]) for g in rna])
