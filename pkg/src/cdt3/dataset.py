"""On-disk dataset bundle: a cell index, tensor payloads, the expressed mask,
NTC means and optional ground truth.

Directory layout::

    dataset.json    dimensions plus gene and protein ids
    samples.tsv     cell_id, target_gene, split, offset
    cells.bin       per cell, four containers: x_rna, x_prot, y_rna, y_prot
    dna.bin         one (n_genes, n_bins, d_dna) container
    ntc.bin         NTC mean RNA, NTC mean protein
    mask.tsv        expressed-protein mask
    peaks.tsv, contacts.tsv, pairs.tsv   ground truth, when known

``offset`` is the byte position of the cell's first container in cells.bin.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import (
    read_contacts,
    read_mask,
    read_pairs,
    read_peaks,
    read_table,
    write_mask,
    write_table,
)
from .synth import (
    PerturbationSample,
    SyntheticWorld,
    export_ground_truth,
    sample_cells,
    sample_ntc,
)
from .tensorio import (
    FormatError,
    atomic_write_bytes,
    atomic_write_text,
    decode_from,
    encode,
    load_tensors,
    save_tensors,
)

SPLITS = ("train", "val", "heldout")
SPLIT_SALT = {"train": 1, "val": 2, "heldout": 3}
NTC_SALT = 5
SAMPLES_HEADER = ("cell_id", "target_gene", "split", "offset")


@dataclass
class DatasetBundle:
    genes: list[str]
    proteins: list[str]
    dna: np.ndarray
    mask: np.ndarray
    ntc_rna: np.ndarray
    ntc_prot: np.ndarray
    samples: dict[str, list[PerturbationSample]]
    peaks: dict[str, list[int]] | None = None
    contacts: dict[str, np.ndarray] | None = None
    pairs: list[tuple[str, str]] | None = None
    n_bins: int = field(init=False)

    def __post_init__(self):
        self.n_bins = int(self.dna.shape[1])

    def split(self, name: str) -> list[PerturbationSample]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return self.samples.get(name, [])

    def targets(self, split: str | None = None) -> list[str]:
        names = SPLITS if split is None else (split,)
        return list(dict.fromkeys(c.target_gene for s in names for c in self.split(s)))

    def cells_of(self, gene: str) -> list[PerturbationSample]:
        return [c for s in SPLITS for c in self.split(s) if c.target_gene == gene]

    def gene_index(self, gene: str) -> int:
        try:
            return self.genes.index(gene)
        except ValueError:
            raise LookupError(f"unknown gene {gene!r}") from None


def build_dataset(world: SyntheticWorld) -> DatasetBundle:
    """Sample every split with fixed per-split salts so reruns are identical."""
    cfg = world.config
    samples = {}
    for name, targets in zip(SPLITS, (world.train_targets, world.val_targets, world.heldout_targets)):
        samples[name] = [c for t in targets for c in sample_cells(world, t, cfg.cells_per_target, SPLIT_SALT[name])]
    xr, xp = sample_ntc(world, max(cfg.n_ntc_cells, 1), NTC_SALT)
    return DatasetBundle(
        genes=list(world.genes), proteins=list(world.proteins), dna=world.dna, mask=world.expressed.copy(),
        ntc_rna=xr.mean(axis=0), ntc_prot=xp.mean(axis=0), samples=samples,
        peaks={g: [int(b) for b in bins] for g, bins in zip(world.genes, world.causal_bins)},
        contacts=dict(zip(world.genes, world.contacts)),
        pairs=[(p, world.genes[s]) for p, s in zip(world.proteins, world.protein_source)],
    )


def write_dataset(bundle: DatasetBundle, directory, world: SyntheticWorld | None = None) -> list[str]:
    """Write the bundle; returns the written file names in a fixed order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    rows = []
    for split in SPLITS:
        for c in bundle.split(split):
            rows.append((c.cell_id, c.target_gene, split, str(buf.tell())))
            for arr in (c.x_rna, c.x_prot, c.y_rna, c.y_prot):
                buf.write(encode(np.asarray(arr, dtype=np.float64)))
    atomic_write_bytes(d / "cells.bin", buf.getvalue())
    write_table(d / "samples.tsv", SAMPLES_HEADER, rows)
    atomic_write_bytes(d / "dna.bin", encode(np.asarray(bundle.dna, dtype=np.float64)))
    save_tensors(d / "ntc.bin", [np.asarray(bundle.ntc_rna, dtype=np.float64),
                                 np.asarray(bundle.ntc_prot, dtype=np.float64)])
    meta = {"format": "cdt3-dataset", "version": 1, "n_genes": len(bundle.genes), "n_prot": len(bundle.proteins),
            "n_bins": bundle.n_bins, "d_dna": int(bundle.dna.shape[2]), "n_cells": len(rows),
            "genes": bundle.genes, "proteins": bundle.proteins}
    atomic_write_text(d / "dataset.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    names = ["dataset.json", "samples.tsv", "cells.bin", "dna.bin", "ntc.bin", "mask.tsv"]
    if world is not None:
        export_ground_truth(world, d)
        names += ["peaks.tsv", "contacts.tsv", "pairs.tsv"]
    else:
        write_mask(d / "mask.tsv", bundle.proteins, bundle.mask)
    return names


def read_dataset(directory) -> DatasetBundle:
    d = Path(directory)
    try:
        meta = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d / 'dataset.json'}: {exc}") from None
    ng, npr, nb, dd = (int(meta[k]) for k in ("n_genes", "n_prot", "n_bins", "d_dna"))
    genes, proteins = list(meta["genes"]), list(meta["proteins"])
    if len(genes) != ng or len(proteins) != npr:
        raise FormatError(f"{d / 'dataset.json'}: id lists disagree with n_genes/n_prot")
    dna, _ = decode_from((d / "dna.bin").read_bytes())
    if dna.shape != (ng, nb, dd):
        raise FormatError(f"{d / 'dna.bin'}: shape {dna.shape}, expected {(ng, nb, dd)}")
    ntc = load_tensors(d / "ntc.bin")
    if len(ntc) != 2 or ntc[0].shape != (ng,) or ntc[1].shape != (npr,):
        raise FormatError(f"{d / 'ntc.bin'}: expected NTC means of length {ng} and {npr}")
    ids, mask = read_mask(d / "mask.tsv", npr)
    if ids != proteins:
        raise FormatError(f"{d / 'mask.tsv'}: protein ids differ from dataset.json")

    payload = (d / "cells.bin").read_bytes()
    want = ((ng,), (npr,), (ng,), (npr,))
    index = {g: i for i, g in enumerate(genes)}
    samples: dict[str, list[PerturbationSample]] = {s: [] for s in SPLITS}
    path = d / "samples.tsv"
    rows = read_table(path, SAMPLES_HEADER)
    if len(rows) != int(meta["n_cells"]):
        raise FormatError(f"{path}: {len(rows)} rows, dataset.json says {meta['n_cells']}")
    for lineno, (cell_id, gene, split, off) in rows:
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
        if gene not in index:
            raise FormatError(f"{path}:{lineno}: unknown target gene {gene!r}")
        try:
            pos = int(off)
            arrs = []
            for shape in want:
                arr, pos = decode_from(payload, pos)
                if arr.shape != shape:
                    raise FormatError(f"tensor shape {arr.shape}, expected {shape}")
                arrs.append(arr)
        except (ValueError, FormatError) as exc:
            raise FormatError(f"{path}:{lineno}: bad offset {off}: {exc}") from None
        samples[split].append(PerturbationSample(gene, dna[index[gene]], *arrs, cell_id=cell_id))

    peaks = read_peaks(d / "peaks.tsv", nb) if (d / "peaks.tsv").exists() else None
    contacts = read_contacts(d / "contacts.tsv", nb) if (d / "contacts.tsv").exists() else None
    pairs = read_pairs(d / "pairs.tsv") if (d / "pairs.tsv").exists() else None
    return DatasetBundle(genes, proteins, dna, mask, ntc[0], ntc[1], samples, peaks, contacts, pairs)
