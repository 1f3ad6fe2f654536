"""TSV formats and run manifests.

Every table has a fixed header row; lines starting with ``#`` are
comments. Numbers are written with 9 significant digits, independent of
locale. Writes go through a temp file and a rename.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import FormatError, atomic_write_text

PEAKS_HEADER = ("gene_id", "bin_index")
CONTACTS_HEADER = ("gene_id", "bin_index", "contact")
MASK_HEADER = ("protein_id", "expressed")
TRACK_HEADER = ("bin_index", "score")
GRADIENT_HEADER = ("protein_id", "gene_id", "value")
PAIRS_HEADER = ("protein_id", "gene_id")


def fmt(x) -> str:
    """9-significant-digit decimal; ``NA`` for not-applicable and NaN."""
    if x is None or not isinstance(x, (int, float, np.integer, np.floating)):
        return "NA"
    x = float(x)
    if math.isnan(x):
        return "NA"
    return format(x, ".9g")


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(header))
    for row in rows:
        lines.append("\t".join(v if isinstance(v, str) else fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_table(path, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    """Rows as ``(line_number, fields)``; the header must match exactly."""
    path = Path(path)
    rows: list[tuple[int, list[str]]] = []
    seen_header = False
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if not seen_header:
                if tuple(fields) != tuple(header):
                    raise FormatError(f"{path}:{lineno}: expected header {list(header)}, got {fields}")
                seen_header = True
                continue
            if len(fields) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(fields)}")
            rows.append((lineno, fields))
    if not seen_header:
        raise FormatError(f"{path}: missing header {list(header)}")
    return rows


def _int(path, lineno, text, name) -> int:
    try:
        return int(text)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: {name} is not an integer: {text!r}") from None


def _float(path, lineno, text, name) -> float:
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: {name} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"{path}:{lineno}: {name} is not finite: {text!r}")
    return v


def _check_bin(path, lineno, b, n_bins):
    if b < 0 or (n_bins is not None and b >= n_bins):
        raise FormatError(f"{path}:{lineno}: bin_index {b} outside [0, {n_bins})")


# --------------------------------------------------------------------- peaks


def write_peaks(path, peaks: Mapping[str, Sequence[int]]) -> None:
    write_table(path, PEAKS_HEADER, ((g, str(int(b))) for g, bins in peaks.items() for b in bins))


def read_peaks(path, n_bins: int | None = None) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for lineno, (gene, b) in read_table(path, PEAKS_HEADER):
        bi = _int(path, lineno, b, "bin_index")
        _check_bin(path, lineno, bi, n_bins)
        out.setdefault(gene, []).append(bi)
    return out


# ------------------------------------------------------------------ contacts


def write_contacts(path, contacts: Mapping[str, Sequence[float]]) -> None:
    write_table(path, CONTACTS_HEADER,
                ((g, str(i), v) for g, prof in contacts.items() for i, v in enumerate(prof)))


def read_contacts(path, n_bins: int) -> dict[str, np.ndarray]:
    """Per-gene dense profiles; every gene must list each bin exactly once."""
    out: dict[str, np.ndarray] = {}
    filled: dict[str, np.ndarray] = {}
    for lineno, (gene, b, v) in read_table(path, CONTACTS_HEADER):
        bi = _int(path, lineno, b, "bin_index")
        _check_bin(path, lineno, bi, n_bins)
        val = _float(path, lineno, v, "contact")
        if val < 0:
            raise FormatError(f"{path}:{lineno}: negative contact {val}")
        if gene not in out:
            out[gene] = np.zeros(n_bins)
            filled[gene] = np.zeros(n_bins, dtype=bool)
        if filled[gene][bi]:
            raise FormatError(f"{path}:{lineno}: duplicate bin {bi} for {gene}")
        out[gene][bi] = val
        filled[gene][bi] = True
    for gene, f in filled.items():
        if not f.all():
            raise FormatError(f"{path}: {gene} is missing {int((~f).sum())} of {n_bins} bins")
    return out


# ---------------------------------------------------------------------- mask


def write_mask(path, protein_ids: Sequence[str], mask) -> None:
    write_table(path, MASK_HEADER, ((p, "1" if m else "0") for p, m in zip(protein_ids, mask)))


def read_mask(path, n_prot: int | None = None) -> tuple[list[str], np.ndarray]:
    ids, vals = [], []
    for lineno, (pid, e) in read_table(path, MASK_HEADER):
        if e not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expressed must be 0 or 1, got {e!r}")
        ids.append(pid)
        vals.append(e == "1")
    if n_prot is not None and len(ids) != n_prot:
        raise FormatError(f"{path}: {len(ids)} proteins, expected {n_prot}")
    return ids, np.array(vals, dtype=bool)


# --------------------------------------------------------------------- pairs


def write_pairs(path, pairs: Sequence[tuple[str, str]]) -> None:
    write_table(path, PAIRS_HEADER, pairs)


def read_pairs(path) -> list[tuple[str, str]]:
    return [(p, g) for _, (p, g) in read_table(path, PAIRS_HEADER)]


# --------------------------------------------------------------------- track


def write_track(path, scores) -> None:
    write_table(path, TRACK_HEADER, ((str(i), v) for i, v in enumerate(np.asarray(scores, dtype=np.float64))))


def read_track(path, n_bins: int | None = None) -> np.ndarray:
    rows = read_table(path, TRACK_HEADER)
    scores = np.empty(len(rows))
    for pos, (lineno, (b, v)) in enumerate(rows):
        bi = _int(path, lineno, b, "bin_index")
        if bi != pos:
            raise FormatError(f"{path}:{lineno}: expected bin_index {pos}, got {bi}")
        scores[pos] = _float(path, lineno, v, "score")
    if n_bins is not None and scores.size != n_bins:
        raise FormatError(f"{path}: {scores.size} bins, expected {n_bins}")
    return scores


# ------------------------------------------------------------------ gradient


def write_gradient(path, matrix, protein_ids: Sequence[str], gene_ids: Sequence[str]) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (len(protein_ids), len(gene_ids)):
        raise FormatError(f"gradient shape {m.shape} does not match ids ({len(protein_ids)}, {len(gene_ids)})")
    write_table(path, GRADIENT_HEADER,
                ((p, g, m[i, j]) for i, p in enumerate(protein_ids) for j, g in enumerate(gene_ids)))


def read_gradient(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Dense matrix plus protein and gene ids in first-seen order."""
    rows = read_table(path, GRADIENT_HEADER)
    prots = list(dict.fromkeys(r[1][0] for r in rows))
    genes = list(dict.fromkeys(r[1][1] for r in rows))
    pi = {p: i for i, p in enumerate(prots)}
    gi = {g: j for j, g in enumerate(genes)}
    m = np.full((len(prots), len(genes)), np.nan)
    for lineno, (p, g, v) in rows:
        m[pi[p], gi[g]] = _float(path, lineno, v, "value")
    if np.isnan(m).any():
        raise FormatError(f"{path}: gradient table is not a full protein x gene grid")
    return m, prots, genes


# ------------------------------------------------------------------ manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    tool_version: str
    command: str
    config_digest: str
    seed: int
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        atomic_write_text(path, json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def read(cls, directory) -> RunManifest:
        path = Path(directory) / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            return cls(**raw)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from None

    def verify_outputs(self, directory) -> list[str]:
        """Names of recorded outputs whose current digest differs."""
        d = Path(directory)
        return [name for name, digest in self.outputs.items()
                if not (d / name).exists() or sha256_file(d / name) != digest]
