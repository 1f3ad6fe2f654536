"""Attention tracks and the statistics run on them: top-fraction site
enrichment, permutation p-values, contact ratios and the signed-rank test."""

from __future__ import annotations

import math
import warnings
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import kernels

TARGET_QUERY_ROW = "target_query_row"
ALL_QUERY_MEAN = "all_query_mean"
TRACK_MODES = (TARGET_QUERY_ROW, ALL_QUERY_MEAN)

WILCOXON_MODES = ("difference", "log_ratio", "ratio")
EXACT_MAX_N = 25


class NotApplicable:
    """Marker for a statistic that has no value (e.g. a gene without sites)."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "N/A"

    def __bool__(self):
        return False


NA = NotApplicable()


class UndefinedRatioError(ZeroDivisionError):
    pass


@dataclass
class AttentionTrack:
    gene: str
    scores: np.ndarray
    mode: str
    n_cells: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("track scores must be 1-D")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError(f"track for {self.gene!r} has negative or non-finite scores")

    @property
    def n_bins(self) -> int:
        return self.scores.size


def attention_track(bundles: Sequence, target_index: int, mode: str = TARGET_QUERY_ROW,
                    gene: str | None = None, key: str = "dna2rna") -> AttentionTrack:
    """Average the DNA-to-RNA map over cells and heads, then pick query rows.

    ``target_query_row`` keeps the perturbed gene's row; ``all_query_mean``
    averages every query row.
    """
    if mode not in TRACK_MODES:
        raise ValueError(f"unknown track mode {mode!r}; expected one of {TRACK_MODES}")
    if not bundles:
        raise ValueError("no attention bundles given")
    maps = np.stack([np.asarray(b[key], dtype=np.float64) for b in bundles])  # (cells, H, nq, nk)
    per_query = maps.mean(axis=0).mean(axis=0)
    if mode == TARGET_QUERY_ROW:
        if not 0 <= target_index < per_query.shape[0]:
            raise IndexError(f"target index {target_index} outside {per_query.shape[0]} query rows")
        scores = per_query[target_index]
    else:
        scores = per_query.mean(axis=0)
    return AttentionTrack(gene if gene is not None else str(target_index), scores, mode, len(bundles))


def _scores(track) -> np.ndarray:
    return track.scores if isinstance(track, AttentionTrack) else np.asarray(track, dtype=np.float64)


def top_k(frac: float, n_bins: int) -> int:
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    # guard against 0.1 * 890 landing a hair above an integer
    return min(n_bins, math.ceil(round(frac * n_bins, 9)))


def top_bins_by_count(track, k: int) -> np.ndarray:
    """The ``k`` highest-scoring bins, ties to the lower index; sorted ascending."""
    s = _scores(track)
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:k])


def top_fraction_bins(track, frac: float) -> np.ndarray:
    s = _scores(track)
    return top_bins_by_count(s, top_k(frac, s.size))


def _validate_sites(sites, n_bins) -> np.ndarray:
    idx = np.unique(np.asarray(list(sites), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_bins):
        raise ValueError(f"site indices must lie in [0, {n_bins})")
    return idx


def site_enrichment(track, sites, frac: float = 0.1):
    """``(hits / |sites|) / frac`` with hits counted in the top-fraction bins.

    Returns ``NA`` for an empty site set.
    """
    s = _scores(track)
    idx = _validate_sites(sites, s.size)
    if idx.size == 0:
        return NA
    hits = np.isin(idx, top_fraction_bins(s, frac)).sum()
    return float(hits) / idx.size / frac


def inclusion_weights(track, frac: float) -> np.ndarray:
    """Per-bin probability of landing in the top set when boundary ties are broken at random.

    Bins strictly above the k-th score get 1, bins tied with it share the
    remaining slots evenly, the rest get 0.
    """
    s = _scores(track)
    k = top_k(frac, s.size)
    kth = np.sort(s)[::-1][k - 1]
    above = s > kth
    tied = s == kth
    w = above.astype(np.float64)
    w[tied] = (k - above.sum()) / tied.sum()
    return w


def permutation_pvalue(track, sites, frac: float = 0.1, n_perm: int = 1000, seed: int = 0,
                       refine: bool = True):
    """Add-one permutation p for enrichment under uniform redraws of the site set.

    Enrichment here uses tie-averaged inclusion weights, so a flat track gives
    p = 1. For tracks without ties at the boundary it equals :func:`site_enrichment`.

    Hit counts take few values, so the plain add-one p is conservative. With
    ``refine`` a redraw that ties the observed enrichment counts only if its
    summed track score at the sites is also at least the observed one.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    s = _scores(track)
    idx = _validate_sites(sites, s.size)
    if idx.size == 0:
        return NA
    w = inclusion_weights(s, frac)
    observed = kernels.draw_weight_sums(idx[None, :], w)[0]
    u = np.random.default_rng(seed).random((n_perm, idx.size))
    draws = kernels.sample_without_replacement(s.size, u)
    perm = kernels.draw_weight_sums(draws, w)
    # sums of identical multisets can differ in the last ulp
    tol = 1e-9 * max(1.0, abs(observed))
    exceed = perm >= observed - tol
    if refine:
        obs_mass = kernels.draw_weight_sums(idx[None, :], s)[0]
        mass = kernels.draw_weight_sums(draws, s)
        tied = np.abs(perm - observed) <= tol
        exceed = (perm > observed + tol) | (tied & (mass >= obs_mass - 1e-9 * max(1.0, abs(obs_mass))))
    return (1 + int(np.count_nonzero(exceed))) / (n_perm + 1)


def hic_contact_ratio(track, contacts, k: int = 20, n_draws: int = 1000, seed: int = 0):
    """(top_mean, random_mean, ratio) of contacts at the top-k attention bins vs random k-sets."""
    s = _scores(track)
    c = np.asarray(contacts, dtype=np.float64)
    if c.shape != s.shape:
        raise ValueError(f"contact profile length {c.size} != track length {s.size}")
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}]")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    top_mean = float(c[top_bins_by_count(s, k)].mean())
    u = np.random.default_rng(seed).random((n_draws, k))
    draws = kernels.sample_without_replacement(s.size, u)
    random_mean = float(np.mean(kernels.draw_weight_sums(draws, c) / k))
    if random_mean == 0.0:
        raise UndefinedRatioError("random-bin mean contact is 0; ratio undefined")
    return top_mean, random_mean, top_mean / random_mean


# ------------------------------------------------------------------ Wilcoxon


def _paired_differences(pairs, mode: str) -> np.ndarray:
    if mode not in WILCOXON_MODES:
        raise ValueError(f"unknown Wilcoxon mode {mode!r}; expected one of {WILCOXON_MODES}")
    a = np.asarray(pairs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] < 1:
        raise ValueError("pairs must be a non-empty sequence of (x, y)")
    x, y = a[:, 0], a[:, 1]
    if mode == "difference":
        return x - y
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError(f"{mode} mode needs strictly positive pairs")
    return np.log(x / y) if mode == "log_ratio" else x / y - 1.0


def midranks(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_exact_p(ranks, w_plus: float) -> float:
    """Two-sided exact p of W+ given (mid-)ranks, by subset-sum counting."""
    doubled = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    counts = kernels.signed_rank_null(doubled)
    total = counts.sum()
    w2 = int(round(2.0 * w_plus))
    lower = counts[: w2 + 1].sum() / total
    upper = counts[w2:].sum() / total
    return min(1.0, 2.0 * min(lower, upper))


def signed_rank_normal_p(ranks, w_plus: float) -> float:
    """Two-sided normal approximation with tie and continuity corrections."""
    r = np.asarray(ranks)
    n = r.size
    mean = n * (n + 1) / 4.0
    var = float((r * r).sum()) / 4.0
    if var == 0.0:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return min(1.0, 2.0 * float(ndtr(-max(z, 0.0))))


def wilcoxon_signed_rank(pairs, mode: str = "difference") -> tuple[float, float]:
    """Return (W+, two-sided p) for paired samples.

    Zero differences are dropped; ties get mid-ranks. The null is enumerated
    exactly for up to 25 nonzero differences, else approximated.
    """
    d = _paired_differences(pairs, mode)
    d = d[d != 0.0]
    if d.size == 0:
        warnings.warn("all paired differences are zero; p set to 1", RuntimeWarning, stacklevel=2)
        return 0.0, 1.0
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    p = signed_rank_exact_p(ranks, w_plus) if d.size <= EXACT_MAX_N else signed_rank_normal_p(ranks, w_plus)
    return w_plus, p


# ------------------------------------------------------------------- cohort


@dataclass
class StatsParams:
    frac: float = 0.1
    n_perm: int = 1000
    hic_k: int = 20
    n_draws: int = 1000
    wilcoxon_mode: str = "ratio"
    track_mode: str = TARGET_QUERY_ROW
    seed: int = 0

    def __post_init__(self):
        top_k(self.frac, 1)
        if self.n_perm < 1 or self.n_draws < 1 or self.hic_k < 1:
            raise ValueError("n_perm, n_draws and hic_k must be >= 1")
        if self.wilcoxon_mode not in WILCOXON_MODES:
            raise ValueError(f"unknown wilcoxon_mode {self.wilcoxon_mode!r}")
        if self.track_mode not in TRACK_MODES:
            raise ValueError(f"unknown track_mode {self.track_mode!r}")

    def to_dict(self) -> dict:
        return {"frac": self.frac, "n_perm": self.n_perm, "hic_k": self.hic_k, "n_draws": self.n_draws,
                "wilcoxon_mode": self.wilcoxon_mode, "track_mode": self.track_mode, "seed": self.seed}


def gene_seed(master: int, gene: str, salt: int = 0) -> list[int]:
    return [int(master), zlib.crc32(gene.encode("utf-8")), salt]


@dataclass
class GeneStats:
    gene: str
    n_sites: int = 0
    n_hits: int = 0
    enrichment: object = NA
    perm_p: object = NA
    hic_top: object = NA
    hic_random: object = NA

    @property
    def hic_ratio(self):
        if self.hic_top is NA:
            return NA
        return self.hic_top / self.hic_random


@dataclass
class EnrichmentReport:
    genes: list[GeneStats]
    wilcoxon_mode: str
    mean_enrichment: object = NA
    n_enriched_2x: int = 0
    n_with_sites: int = 0
    mean_hic_ratio: object = NA
    n_ratio_above_1: int = 0
    n_with_contacts: int = 0
    wilcoxon_statistic: object = NA
    wilcoxon_p: object = NA
    extras: dict = field(default_factory=dict)


def gene_stats(track, sites, contacts, params: StatsParams, gene: str) -> GeneStats:
    s = _scores(track)
    st = GeneStats(gene)
    if sites is not None:
        idx = _validate_sites(sites, s.size)
        st.n_sites = int(idx.size)
        if idx.size:
            st.n_hits = int(np.isin(idx, top_fraction_bins(s, params.frac)).sum())
            st.enrichment = site_enrichment(s, idx, params.frac)
            st.perm_p = permutation_pvalue(s, idx, params.frac, params.n_perm, gene_seed(params.seed, gene, 1))
    if contacts is not None and np.size(contacts):
        top, rnd, _ = hic_contact_ratio(s, contacts, min(params.hic_k, s.size), params.n_draws,
                                        gene_seed(params.seed, gene, 2))
        st.hic_top, st.hic_random = top, rnd
    return st


def summarize(stats: Sequence[GeneStats], wilcoxon_mode: str = "ratio") -> EnrichmentReport:
    """Cohort aggregates; genes without sites or contacts drop out of the matching mean."""
    if not stats:
        raise ValueError("no usable genes")
    rep = EnrichmentReport(list(stats), wilcoxon_mode)
    enr = [g.enrichment for g in stats if g.enrichment is not NA]
    rep.n_with_sites = len(enr)
    if enr:
        rep.mean_enrichment = float(np.mean(enr))
        rep.n_enriched_2x = int(sum(e > 2.0 for e in enr))
    pairs = [(g.hic_top, g.hic_random) for g in stats if g.hic_top is not NA]
    rep.n_with_contacts = len(pairs)
    if pairs:
        ratios = [t / r for t, r in pairs]
        rep.mean_hic_ratio = float(np.mean(ratios))
        rep.n_ratio_above_1 = int(sum(x > 1.0 for x in ratios))
        rep.wilcoxon_statistic, rep.wilcoxon_p = wilcoxon_signed_rank(pairs, wilcoxon_mode)
    return rep


def cohort_report(tracks: Mapping[str, object], annotations: Mapping[str, Sequence[int]],
                  contacts: Mapping[str, Sequence[float]], params: StatsParams | None = None) -> EnrichmentReport:
    """Per-gene statistics for every tracked gene, then cohort aggregates.

    Genes missing from ``contacts`` (or with an empty profile) are left out
    of the contact statistics only.
    """
    params = params or StatsParams()
    if not tracks:
        raise ValueError("no tracks given")
    stats = [gene_stats(tracks[g], annotations.get(g), contacts.get(g), params, g) for g in tracks]
    if all(s.enrichment is NA and s.hic_top is NA for s in stats):
        raise ValueError("no gene has sites or contacts")
    return summarize(stats, params.wilcoxon_mode)
