"""``cdt3`` command line.

Exit codes: 0 success, 1 runtime error, 2 usage or config error. Failures
print one JSON line on stderr: ``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, fixtures, pharma, pipeline, reports
from . import interpret as I
from .config import RunConfig, default_config, parse_config, serialize_config
from .dataset import SPLITS, read_dataset, write_dataset
from .fileio import RunManifest, sha256_file, write_gradient, write_track
from .model import (
    VARIANTS,
    ConfigError,
    load_checkpoint,
    planned_breakdown,
    save_checkpoint,
    transfer_weights,
)
from .tensorio import FormatError, atomic_write_text


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_config(args) -> RunConfig:
    return parse_config(args.config) if args.config else default_config("desk")


class _Run:
    """Collects outputs and writes the manifest when the command finishes."""

    def __init__(self, args, cfg: RunConfig | None = None):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out) if getattr(args, "out", None) else None
        self.outputs: list[str] = []
        self.started = _now()
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        if self.out is None:
            raise UsageError(f"--out is required to write {name}")
        self.outputs.append(name)
        return self.out / name

    def finish(self, inputs: dict[str, str]) -> None:
        if self.out is None:
            return
        digests = {}
        for name, p in inputs.items():
            path = Path(p)
            digests[name] = sha256_file(path) if path.is_file() else str(path)
        cfg = self.cfg
        manifest = RunManifest(
            tool_version=__version__, command=" ".join(["cdt3", self.args.command] + self.args.argv),
            config_digest=cfg.digest() if cfg else "", seed=cfg.seed if cfg else 0,
            config=cfg.to_dict() if cfg else {}, inputs=digests,
            outputs={n: sha256_file(self.out / n) for n in self.outputs},
            started=self.started, finished=_now())
        manifest.write(self.out)


def _load_model(path):
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    run = _Run(args, cfg)
    world, data = pipeline.synthesize(cfg)
    names = write_dataset(data, run.out, world)
    run.outputs.extend(names)
    atomic_write_text(run.path("config.json"), serialize_config(cfg))
    run.finish({"config": args.config or "preset:desk"})
    print(f"wrote {sum(len(data.split(s)) for s in SPLITS)} cells for {len(data.targets())} targets to {run.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run = _Run(args, cfg)
    data = read_dataset(args.data)
    result = pipeline.train(cfg, data)
    save_checkpoint(result.stage1, run.path("stage1.ckpt"))
    save_checkpoint(result.state, run.path("model.ckpt"))
    h0, h1, h2 = result.histories
    reports.write_history(run.path("history.tsv"), {"stage1": h0, "phase1": h1, "phase2": h2})
    reports.write_transfer_report(run.path("transfer.tsv"), result.transfer)
    run.finish({"config": args.config or "preset:desk", "data": args.data})
    print(f"best val loss {h2.best_val_loss:.6g} (phase2 epoch {h2.best_epoch + 1}, {h2.stop_reason})")
    return 0


def cmd_eval(args) -> int:
    run = _Run(args)
    data = read_dataset(args.data)
    state = _load_model(args.model)
    rep = pipeline.evaluate_split(state, data, args.split)
    reports.write_eval_report(run.path("eval.tsv"), rep)
    run.finish({"data": args.data, "model": args.model})
    print(f"mean pseudo-bulk r: rna {rep.mean_rna_r:.4f}, protein {rep.mean_prot_r:.4f}")
    return 0


def _tracks(args, data, state):
    return pipeline.attention_tracks(state, data, args.gene or None, args.mode)


def cmd_attn(args) -> int:
    run = _Run(args)
    data = read_dataset(args.data)
    state = _load_model(args.model)
    for gene, tr in _tracks(args, data, state).items():
        write_track(run.path(f"track_{gene}.tsv"), tr.scores)
    run.finish({"data": args.data, "model": args.model})
    return 0


def _enrich(args, sites: bool, contacts: bool, stem: str) -> int:
    cfg = _load_config(args)
    params = cfg.stats
    if args.mode:
        params = I.StatsParams(**{**params.to_dict(), "track_mode": args.mode})
    run = _Run(args, cfg)
    data = read_dataset(args.data)
    state = _load_model(args.model)
    tracks = pipeline.attention_tracks(state, data, args.gene or None, params.track_mode)
    rep = pipeline.enrichment(tracks, data, params, use_sites=sites, use_contacts=contacts)
    reports.write_enrichment_report(run.path(f"{stem}.tsv"), rep)
    reports.write_cohort_summary(run.path("cohort.tsv"), rep)
    run.finish({"config": args.config or "preset:desk", "data": args.data, "model": args.model})
    if sites:
        print(f"mean enrichment {rep.mean_enrichment}; {rep.n_enriched_2x}/{rep.n_with_sites} genes > 2x")
    if contacts:
        print(f"mean contact ratio {rep.mean_hic_ratio}; {rep.n_ratio_above_1}/{rep.n_with_contacts} > 1; "
              f"wilcoxon p {rep.wilcoxon_p}")
    return 0


def cmd_enrich(args) -> int:
    return _enrich(args, True, True, "enrichment")


def cmd_hic(args) -> int:
    return _enrich(args, False, True, "hic")


def cmd_stats_fixture(args) -> int:
    run = _Run(args)
    if args.appendix == "F":
        rep = fixtures.site_count_report()
        print(f"mean enrichment {rep.mean_enrichment:.4f}x; {rep.n_enriched_2x}/{rep.n_with_sites} genes > 2x")
        inputs = {"fixture": str(fixtures.data_path("appendix_f.tsv"))}
    else:
        rep = fixtures.contact_report(args.wilcoxon_mode)
        print(f"mean ratio {rep.mean_hic_ratio:.4f}x; {rep.n_ratio_above_1}/{rep.n_with_contacts} > 1; "
              f"wilcoxon ({rep.wilcoxon_mode}) p {rep.wilcoxon_p:.4g}")
        inputs = {"fixture": str(fixtures.data_path("appendix_h.tsv"))}
    if run.out is not None:
        reports.write_enrichment_report(run.path("fixture.tsv"), rep)
        reports.write_cohort_summary(run.path("cohort.tsv"), rep)
    run.finish(inputs)
    return 0


def cmd_grad(args) -> int:
    run = _Run(args)
    data = read_dataset(args.data)
    state = _load_model(args.model)
    gi = data.gene_index(args.gene)
    dna = data.dna[gi]
    if args.source == "ntc":
        cells = [pipeline.ntc_cell(data)]
    else:
        cells = data.cells_of(args.gene)
        if not cells:
            raise LookupError(f"no cells perturb {args.gene!r}")
    prof = pharma.gradient_profile(state, cells, dna, descriptor=f"{args.source}:{args.gene}", dtype=np.float64)
    write_gradient(run.path("gradient.tsv"), prof.matrix, data.proteins, data.genes)
    table = pharma.side_effect_ranking(prof.column(gi), data.proteins, data.mask, args.top_n)
    reports.write_side_effects(run.path("side_effects.tsv"), table)
    run.finish({"data": args.data, "model": args.model})
    for r in table.rows[:5]:
        print(f"{r.rank}\t{r.protein}\t{r.effect:+.4g}\t{r.direction}")
    return 0


def cmd_concord(args) -> int:
    run = _Run(args)
    data = read_dataset(args.data)
    state = _load_model(args.model)
    a, b = pipeline.gradient_profiles(state, data, args.gene)
    c = pharma.gradient_concordance(a, b, data.gene_index(args.gene), data.mask, args.top_n)
    reports.write_concordance(run.path("concordance.tsv"), c)
    run.finish({"data": args.data, "model": args.model})
    print(f"expressed proteins: pearson {c.pearson_masked:.4f}, direction {c.direction_pct_masked:.1f}%")
    return 0


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    target = cfg.model.replace(architecture_variant=args.variant) if args.variant else cfg.model
    run = _Run(args, cfg)
    state, rep = transfer_weights(args.source, target, cfg.seed)
    reports.write_transfer_report(run.path("transfer.tsv"), rep)
    save_checkpoint(state, run.path("model.ckpt"))
    run.finish({"config": args.config or "preset:desk", "source": args.source})
    counts = rep.counts
    print(f"loaded_exact {counts['loaded_exact']}, shape_mismatch {counts['shape_mismatch']} "
          f"({', '.join(rep.groups_with('shape_mismatch')) or 'none'}), absent_in_source {counts['absent_in_source']}")
    return 0


def cmd_params(args) -> int:
    cfg = _load_config(args)
    run = _Run(args, cfg)
    breakdown = planned_breakdown(cfg.model, args.stage1_only)
    for k, v in breakdown.items():
        print(f"{k}\t{v}")
    print(f"total\t{sum(breakdown.values())}")
    if run.out is not None:
        reports.write_breakdown(run.path("params.tsv"), breakdown)
    run.finish({"config": args.config or "preset:desk"})
    return 0


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdt3", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cdt3 {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, *, config=False, data=False, model=False, out=True, gene=None, help=""):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        if config:
            sp.add_argument("--config", help="JSON run config (default: desk preset)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by `synth`")
        if model:
            sp.add_argument("--model", required=True, help="checkpoint file")
        if out is not None:
            sp.add_argument("--out", required=out, help="output directory")
        if gene == "many":
            sp.add_argument("--gene", action="append", help="restrict to these genes (repeatable)")
        elif gene == "one":
            sp.add_argument("--gene", required=True)
        return sp

    add("synth", cmd_synth, config=True, help="generate a synthetic dataset with ground truth")
    add("train", cmd_train, config=True, data=True, help="stage-1 then two-phase training")
    sp = add("eval", cmd_eval, data=True, model=True, help="pseudo-bulk correlations on a split")
    sp.add_argument("--split", choices=SPLITS, default="heldout")
    for name, fn, hlp in (("attn", cmd_attn, "export attention tracks"),
                          ("enrich", cmd_enrich, "site enrichment and contact statistics"),
                          ("hic", cmd_hic, "contact statistics only")):
        sp = add(name, fn, config=name != "attn", data=True, model=True, gene="many", help=hlp)
        sp.add_argument("--mode", choices=I.TRACK_MODES, default=None if name != "attn" else I.TARGET_QUERY_ROW)
    sp = add("stats-fixture", cmd_stats_fixture, out=False, help="recompute the shipped reference tables")
    sp.add_argument("--appendix", choices=("F", "H"), required=True)
    sp.add_argument("--wilcoxon-mode", choices=I.WILCOXON_MODES, default="ratio")
    sp = add("grad", cmd_grad, data=True, model=True, gene="one", help="protein/RNA gradient profile")
    sp.add_argument("--source", choices=("ntc", "cells"), default="ntc")
    sp.add_argument("--top-n", type=int, default=None)
    sp = add("concord", cmd_concord, data=True, model=True, gene="one", help="NTC vs perturbed-cell gradients")
    sp.add_argument("--top-n", type=int, default=10)
    sp = add("transfer", cmd_transfer, config=True, help="load a stage-1 checkpoint into a full model")
    sp.add_argument("--source", required=True, help="stage-1 checkpoint")
    sp.add_argument("--variant", choices=VARIANTS, default=None)
    sp = add("params", cmd_params, config=True, out=False, help="parameter count per group")
    sp.add_argument("--stage1-only", action="store_true")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    args.argv = argv[1:]
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 2)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except FormatError as exc:
        return _fail("format", str(exc), 1)
    except (OSError, ValueError, LookupError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
