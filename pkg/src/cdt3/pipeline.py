"""End-to-end steps shared by the command line and the acceptance harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import interpret as I
from . import pharma
from .config import RunConfig
from .dataset import DatasetBundle, build_dataset
from .metrics import EvalReport, evaluate
from .model import ModelState, TransferReport, capture_attention
from .synth import SyntheticWorld, generate_world
from .training import TrainHistory, predict, run_schedule


def synthesize(cfg: RunConfig) -> tuple[SyntheticWorld, DatasetBundle]:
    world = generate_world(cfg.world)
    return world, build_dataset(world)


@dataclass
class TrainedRun:
    state: ModelState
    stage1: ModelState
    histories: tuple[TrainHistory, TrainHistory, TrainHistory]
    transfer: TransferReport


def train(cfg: RunConfig, data: DatasetBundle) -> TrainedRun:
    if cfg.model.n_genes != len(data.genes) or cfg.model.n_prot != len(data.proteins) \
            or cfg.model.n_bins != data.n_bins or cfg.model.d_dna != data.dna.shape[2]:
        raise ValueError("model config dimensions do not match the dataset")
    state, stage1, hist, report = run_schedule(cfg.model, data.split("train"), data.split("val"), data.mask,
                                               cfg.schedule, cfg.seed)
    return TrainedRun(state, stage1, hist, report)


def evaluate_split(state: ModelState, data: DatasetBundle, split: str = "heldout") -> EvalReport:
    cells = data.split(split)
    if not cells:
        raise ValueError(f"split {split!r} has no cells")
    rna, prot = predict(state, cells)
    if prot is None:
        raise ValueError("model has no protein stage")
    return evaluate(rna, prot, cells, data.mask)


def attention_tracks(state: ModelState, data: DatasetBundle, genes=None,
                     mode: str = I.TARGET_QUERY_ROW) -> dict[str, I.AttentionTrack]:
    """One track per perturbed gene, averaged over all of that gene's cells."""
    genes = data.targets() if genes is None else list(genes)
    out = {}
    for g in genes:
        cells = data.cells_of(g)
        if not cells:
            raise LookupError(f"no cells perturb {g!r}")
        bundles = [capture_attention(state, c) for c in cells]
        out[g] = I.attention_track(bundles, data.gene_index(g), mode, g)
    return out


def enrichment(tracks, data: DatasetBundle, params: I.StatsParams, use_sites: bool = True,
               use_contacts: bool = True) -> I.EnrichmentReport:
    if use_sites and data.peaks is None:
        raise ValueError("dataset has no peak annotations")
    if use_contacts and data.contacts is None:
        raise ValueError("dataset has no contact profiles")
    sites = {g: data.peaks.get(g, []) for g in tracks} if use_sites else {}
    contacts = {g: data.contacts[g] for g in tracks if g in data.contacts} if use_contacts else {}
    return I.cohort_report(tracks, sites, contacts, params)


def ntc_cell(data: DatasetBundle) -> pharma.Cell:
    return pharma.Cell(np.asarray(data.ntc_rna), np.asarray(data.ntc_prot))


def gradient_profiles(state: ModelState, data: DatasetBundle, gene: str):
    """(NTC-mean profile, perturbed-cell profile) for one target, 64-bit."""
    cells = data.cells_of(gene)
    if not cells:
        raise LookupError(f"no cells perturb {gene!r}")
    dna = data.dna[data.gene_index(gene)]
    a = pharma.gradient_profile(state, [ntc_cell(data)], dna, descriptor=f"ntc_mean:{gene}", dtype=np.float64)
    b = pharma.gradient_profile(state, cells, dna, descriptor=f"perturbed:{gene}", dtype=np.float64)
    return a, b
