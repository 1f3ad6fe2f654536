"""Shipped reference tables and preset configs.

The per-gene tables carry counts and summary values only, so the loaders
rebuild inputs that realize them: a strictly decreasing attention track
with each gene's sites placed inside or outside its top fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .fileio import read_table
from .interpret import (
    EnrichmentReport,
    GeneStats,
    StatsParams,
    cohort_report,
    summarize,
    top_k,
)
from .tensorio import FormatError

FIXTURE_BINS = 896


def data_path(name: str) -> Path:
    return Path(str(resources.files("cdt3") / "data" / name))


@dataclass(frozen=True)
class SiteCountRow:
    gene: str
    n_sites: int
    n_top: int
    printed: float | None


@dataclass(frozen=True)
class ContactRow:
    gene: str
    top_mean: float
    random_mean: float
    printed_ratio: float


def site_count_rows(path=None) -> list[SiteCountRow]:
    path = path or data_path("appendix_f.tsv")
    out = []
    for lineno, (g, n, k, e) in read_table(path, ("gene_id", "n_sites", "n_top", "enrichment")):
        try:
            row = SiteCountRow(g, int(n), int(k), None if e == "NA" else float(e))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed row") from None
        if not 0 <= row.n_top <= row.n_sites:
            raise FormatError(f"{path}:{lineno}: n_top must lie in [0, n_sites]")
        out.append(row)
    return out


def contact_rows(path=None) -> list[ContactRow]:
    path = path or data_path("appendix_h.tsv")
    out = []
    for lineno, (g, t, r, q) in read_table(path, ("gene_id", "top_mean", "random_mean", "ratio")):
        try:
            out.append(ContactRow(g, float(t), float(r), float(q)))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed row") from None
    return out


def realize_site_counts(rows, n_bins: int = FIXTURE_BINS, frac: float = 0.1):
    """Tracks and site sets whose top-fraction hit counts equal each row's."""
    k = top_k(frac, n_bins)
    track = np.arange(n_bins, 0, -1, dtype=np.float64)
    tracks, sites = {}, {}
    for r in rows:
        if r.n_top > k or r.n_sites - r.n_top > n_bins - k:
            raise ValueError(f"{r.gene}: counts do not fit {n_bins} bins at frac {frac}")
        inside = np.linspace(0, k - 1, r.n_top).round().astype(np.int64) if r.n_top else np.empty(0, np.int64)
        outside = (k + np.linspace(0, n_bins - k - 1, r.n_sites - r.n_top).round().astype(np.int64)
                   if r.n_sites > r.n_top else np.empty(0, np.int64))
        tracks[r.gene] = track
        sites[r.gene] = np.concatenate([inside, outside]).tolist()
    return tracks, sites


def site_count_report(params: StatsParams | None = None, path=None) -> EnrichmentReport:
    params = params or StatsParams()
    tracks, sites = realize_site_counts(site_count_rows(path), FIXTURE_BINS, params.frac)
    return cohort_report(tracks, sites, {}, params)


def contact_report(wilcoxon_mode: str = "ratio", path=None) -> EnrichmentReport:
    stats = [GeneStats(r.gene, hic_top=r.top_mean, hic_random=r.random_mean) for r in contact_rows(path)]
    return summarize(stats, wilcoxon_mode)


def headline() -> dict:
    return json.loads(data_path("headline.json").read_text(encoding="utf-8"))
