"""One test per acceptance criterion; each records a PASS/FAIL line shown in the terminal summary."""

import dataclasses
import time

import numpy as np
from conftest import (
    ACCEPTANCE_LINES,
    ACCEPTANCE_SEEDS,
    TRAIN_SECONDS,
    closed_form_count,
    desk_run,
    random_graph_case,
    random_model_case,
    unit_scaled,
)
from scipy import stats

from cdt3 import autodiff as ad
from cdt3 import fixtures, pharma, pipeline
from cdt3 import interpret as I
from cdt3.model import (
    LOADED,
    MISMATCH,
    SINGLE_STAGE,
    ModelConfig,
    ParamLeaves,
    build_model,
    checkpoint_bytes,
    count_parameters,
    forward_graph,
    parameter_breakdown,
    planned_breakdown,
    save_checkpoint,
    transfer_weights,
)
from cdt3.reports import write_eval_report
from cdt3.training import loss_graph

# pinned tolerances
ENRICH_TARGET, ENRICH_TOL = 8.59, 0.01
RATIO_TARGET, RATIO_TOL = 1.30, 0.005
WILCOXON_BAND = (0.005, 0.06)
PARAM_TARGET, PARAM_TOL = 30_987_766, 0.05
FD_MAX_REL = 1e-3
R_MIN = 0.8
SEEDS_NEEDED = 4
TRAIN_BUDGET_S = 600
ENRICH_MIN, PERM_ALPHA, GENE_FRACTION = 2.0, 0.05, 0.8
WILCOXON_ALPHA = 0.05
GRAD_R_MIN, GRAD_DIR_MIN = 0.9, 90.0
KS_MAX = 0.1


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_site_table_arithmetic():
    t0 = time.perf_counter()
    rep = fixtures.site_count_report()
    dt = time.perf_counter() - t0
    ok = (abs(rep.mean_enrichment - ENRICH_TARGET) <= ENRICH_TOL and rep.n_enriched_2x == 27
          and rep.n_with_sites == 27 and dt < 1.0)
    record(1, ok, f"mean enrichment {rep.mean_enrichment:.4f} (target {ENRICH_TARGET} +/- {ENRICH_TOL}), "
                  f"{rep.n_enriched_2x}/{rep.n_with_sites} > 2x, {dt:.3f}s")


def test_criterion_02_contact_table_arithmetic():
    t0 = time.perf_counter()
    rep = fixtures.contact_report("ratio")
    dt = time.perf_counter() - t0
    lo, hi = WILCOXON_BAND
    ok = (abs(rep.mean_hic_ratio - RATIO_TARGET) <= RATIO_TOL and rep.n_ratio_above_1 == 16
          and rep.n_with_contacts == 25 and lo <= rep.wilcoxon_p <= hi and dt < 1.0)
    diff_p = fixtures.contact_report("difference").wilcoxon_p
    record(2, ok, f"mean ratio {rep.mean_hic_ratio:.5f} (target {RATIO_TARGET} +/- {RATIO_TOL}), "
                  f"{rep.n_ratio_above_1}/{rep.n_with_contacts} > 1, wilcoxon p {rep.wilcoxon_p:.4f} ratio mode "
                  f"({diff_p:.4f} difference mode), band {WILCOXON_BAND}, {dt:.3f}s")


def test_criterion_03_parameter_count():
    paper = ModelConfig.paper()
    breakdown = planned_breakdown(paper)
    total = sum(breakdown.values())
    desk = build_model(ModelConfig.desk())
    oracle = closed_form_count(64, 48, 50, 16, 32, 64, 64)
    ok = (abs(total - PARAM_TARGET) / PARAM_TARGET <= PARAM_TOL and count_parameters(desk) == oracle
          and sum(parameter_breakdown(desk).values()) == oracle and len(breakdown) > 10)
    record(3, ok, f"full-size total {total:,} ({(total - PARAM_TARGET) / PARAM_TARGET:+.3%} vs {PARAM_TARGET:,}), "
                  f"{len(breakdown)} groups; desk {count_parameters(desk):,} vs oracle {oracle:,}")


def test_criterion_04_weight_transfer(tmp_path):
    _, _, _, run, _ = desk_run(0)
    t0 = time.perf_counter()
    path = tmp_path / "stage1.ckpt"
    save_checkpoint(run.stage1, path)
    full, rep = transfer_weights(path, ModelConfig.desk(), 0)
    identical = all(full.params[k].tobytes() == v.tobytes() for k, v in run.stage1.params.items())
    _, single = transfer_weights(path, ModelConfig.desk(architecture_variant=SINGLE_STAGE), 0)
    dt = time.perf_counter() - t0
    ok = (rep.counts[LOADED] == len(run.stage1.params) and identical
          and single.groups_with(MISMATCH) == ["vce_n.fusion"] and dt < 5.0)
    record(4, ok, f"{rep.counts[LOADED]}/{len(run.stage1.params)} stage-1 tensors loaded_exact, payloads identical "
                  f"{identical}; single-stage mismatch groups {single.groups_with(MISMATCH)}; {dt:.2f}s")


def test_criterion_05_gradient_correctness():
    t0 = time.perf_counter()
    worst_graph = 0.0
    for s in range(100):
        fn, pt, _ = random_graph_case(s)
        err = ad.finite_diff_check(unit_scaled(fn, pt, training=True, graph_seed=s), pt, max_entries=3, seed=s,
                                   training=True, graph_seed=s)
        worst_graph = max(worst_graph, err)
    worst_model = 0.0
    for s in range(10):
        cfg, fn, pt = random_model_case(s)
        tr = cfg.dropout > 0
        err = ad.finite_diff_check(unit_scaled(fn, pt, training=tr, graph_seed=s), pt, max_entries=3, seed=s,
                                   training=tr, graph_seed=s)
        worst_model = max(worst_model, err)
    dt = time.perf_counter() - t0
    ok = worst_graph <= FD_MAX_REL and worst_model <= FD_MAX_REL and dt < 120
    record(5, ok, f"max rel error {worst_graph:.2e} over 100 graphs, {worst_model:.2e} over 10 model configs "
                  f"(limit {FD_MAX_REL}), {dt:.1f}s")


def test_criterion_06_end_to_end_reproduction():
    rows, passed = [], 0
    for seed in ACCEPTANCE_SEEDS:
        _, _, _, _, rep = desk_run(seed)
        ok = rep.mean_rna_r >= R_MIN and rep.mean_prot_r >= R_MIN and TRAIN_SECONDS[seed] < TRAIN_BUDGET_S
        passed += ok
        rows.append(f"seed {seed}: rna {rep.mean_rna_r:.3f} prot {rep.mean_prot_r:.3f} {TRAIN_SECONDS[seed]:.0f}s")
    record(6, passed >= SEEDS_NEEDED, f"{passed}/{len(ACCEPTANCE_SEEDS)} seeds reach r >= {R_MIN} "
                                      f"(need {SEEDS_NEEDED}); " + "; ".join(rows))


def _planted_interpretability(seed):
    cfg, world, data, run, _ = desk_run(seed)
    tracks = pipeline.attention_tracks(run.state, data, mode=cfg.stats.track_mode)
    sites_rep = pipeline.enrichment(tracks, data, cfg.stats, use_contacts=False)
    good = sum(1 for g in sites_rep.genes
               if g.enrichment is not I.NA and g.enrichment >= ENRICH_MIN and g.perm_p < PERM_ALPHA)
    planted = [world.genes[i] for i in np.flatnonzero(world.contact_planted) if world.genes[i] in tracks]
    hic_rep = pipeline.enrichment({g: tracks[g] for g in planted}, data, cfg.stats, use_sites=False)
    frac = good / sites_rep.n_with_sites
    ok = frac >= GENE_FRACTION and hic_rep.wilcoxon_p < WILCOXON_ALPHA
    return ok, frac, good, sites_rep.n_with_sites, hic_rep


def test_criterion_07_planted_interpretability():
    ok, frac, good, n, hic = _planted_interpretability(0)
    tally = sum(_planted_interpretability(s)[0] for s in ACCEPTANCE_SEEDS)
    record(7, ok, f"seed 0: {good}/{n} genes ({frac:.0%}) enrichment >= {ENRICH_MIN} with p < {PERM_ALPHA} "
                  f"(need {GENE_FRACTION:.0%}); planted-contact wilcoxon p {hic.wilcoxon_p:.2e} over "
                  f"{hic.n_with_contacts} genes, mean ratio {hic.mean_hic_ratio:.2f}; "
                  f"{tally}/{len(ACCEPTANCE_SEEDS)} seeds pass")


def _gradient_concordance(seed):
    _, _, data, run, _ = desk_run(seed)
    out = []
    for gene in data.targets("heldout"):
        a, b = pipeline.gradient_profiles(run.state, data, gene)
        c = pharma.gradient_concordance(a, b, data.gene_index(gene), data.mask)
        out.append((gene, c))
    ok = all(c.pearson_masked >= GRAD_R_MIN and c.direction_pct_masked >= GRAD_DIR_MIN for _, c in out)
    return ok, out


def test_criterion_08_gradient_concordance():
    ok, rows = _gradient_concordance(0)
    tally = sum(_gradient_concordance(s)[0] for s in ACCEPTANCE_SEEDS)
    detail = "; ".join(f"{g}: r {c.pearson_masked:.3f}, direction {c.direction_pct_masked:.1f}% of {c.n_masked}"
                       for g, c in rows)
    record(8, ok, f"seed 0 held-out targets {detail} (need r >= {GRAD_R_MIN}, >= {GRAD_DIR_MIN:.0f}%); "
                  f"{tally}/{len(ACCEPTANCE_SEEDS)} seeds pass")


def _loss_and_grads(state, sample, mask):
    g = ad.Graph(seed=1, step=0, training=True)
    out, _ = forward_graph(ParamLeaves(g, state.params, lambda n: True), state.config, sample.dna, sample.x_rna,
                           sample.x_prot)
    L = loss_graph(out, sample, mask, state.config.lambda_prot)[0]
    return L.data.tobytes(), {k: v.tobytes() for k, v in ad.backward(g, L).items()}


def test_criterion_09_masking_exactness(desk0):
    _, _, data = desk0
    state = build_model(ModelConfig.desk(), 0)
    mask = data.mask
    checked = identical = 0
    for s in data.split("train")[:5]:
        base = _loss_and_grads(state, s, mask)
        rng = np.random.default_rng(checked)
        y = s.y_prot.copy()
        y[~mask] += rng.normal(scale=100.0, size=int((~mask).sum()))
        identical += _loss_and_grads(state, dataclasses.replace(s, y_prot=y), mask) == base
        checked += 1
    record(9, identical == checked, f"{identical}/{checked} cells: loss and all {len(base[1])} gradients "
                                    f"bit-identical after perturbing {int((~mask).sum())} masked-out targets")


def test_criterion_10_determinism(cli_run0, tmp_path):
    _, _, _, run, rep = desk_run(0)
    write_eval_report(tmp_path / "eval.tsv", rep)
    same_eval = (tmp_path / "eval.tsv").read_bytes() == (cli_run0 / "eval" / "eval.tsv").read_bytes()
    same_model = checkpoint_bytes(run.state) == (cli_run0 / "model" / "model.ckpt").read_bytes()
    same_stage1 = checkpoint_bytes(run.stage1) == (cli_run0 / "model" / "stage1.ckpt").read_bytes()
    record(10, same_eval and same_model and same_stage1,
           f"independent synth->train->eval reruns: eval report identical {same_eval}, "
           f"model checkpoint identical {same_model}, stage-1 checkpoint identical {same_stage1}")


def test_criterion_11_permutation_calibration():
    ps = []
    for i in range(500):
        rng = np.random.default_rng([i, 0xCA1])
        track = rng.random(64)
        sites = rng.choice(64, 3, replace=False)
        ps.append(I.permutation_pvalue(track, sites, 0.1, 999, seed=[i, 1]))
    ks = stats.kstest(ps, "uniform").statistic
    record(11, ks < KS_MAX, f"KS statistic {ks:.4f} over 500 null trials (limit {KS_MAX}), mean p {np.mean(ps):.3f}")
