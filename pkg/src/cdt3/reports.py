"""Fixed-column TSV writers for every report the pipeline produces."""

from __future__ import annotations

from .fileio import write_table
from .interpret import NA, EnrichmentReport
from .metrics import DivergenceTable, EvalReport
from .model import TransferReport
from .pharma import Concordance, SideEffectTable
from .training import TrainHistory


def _v(x):
    return "NA" if x is NA else x


def write_eval_report(path, rep: EvalReport) -> None:
    rows = [(g.gene, str(g.n_cells), g.rna_r, g.prot_r, g.cell_r) for g in rep.genes]
    rows.append(("MEAN", str(sum(g.n_cells for g in rep.genes)), rep.mean_rna_r, rep.mean_prot_r, rep.mean_cell_r))
    write_table(path, ("gene_id", "n_cells", "rna_r", "prot_r", "cell_rna_r"), rows)


def write_enrichment_report(path, rep: EnrichmentReport) -> None:
    rows = [(g.gene, str(g.n_sites), str(g.n_hits), _v(g.enrichment), _v(g.perm_p), _v(g.hic_top),
             _v(g.hic_random), _v(g.hic_ratio)) for g in rep.genes]
    write_table(path, ("gene_id", "n_sites", "n_top", "enrichment", "perm_p", "hic_top", "hic_random", "hic_ratio"),
                rows)


def write_cohort_summary(path, rep: EnrichmentReport, extra: dict | None = None) -> None:
    rows = [("mean_enrichment", _v(rep.mean_enrichment)), ("n_enriched_2x", str(rep.n_enriched_2x)),
            ("n_with_sites", str(rep.n_with_sites)), ("mean_hic_ratio", _v(rep.mean_hic_ratio)),
            ("n_ratio_above_1", str(rep.n_ratio_above_1)), ("n_with_contacts", str(rep.n_with_contacts)),
            ("wilcoxon_mode", rep.wilcoxon_mode), ("wilcoxon_statistic", _v(rep.wilcoxon_statistic)),
            ("wilcoxon_p", _v(rep.wilcoxon_p))]
    rows.extend((extra or {}).items())
    write_table(path, ("metric", "value"), rows)


def write_history(path, histories: dict[str, TrainHistory]) -> None:
    rows = []
    for phase, h in histories.items():
        for epoch, tr, va, lr, lp in h.rows():
            rows.append((phase, str(epoch), tr, va, lr, lp, "1" if epoch - 1 == h.best_epoch else "0"))
    write_table(path, ("phase", "epoch", "train_loss", "val_loss", "val_l_rna", "val_l_prot", "best"), rows)


def write_transfer_report(path, rep: TransferReport) -> None:
    write_table(path, ("tensor", "status"), sorted(rep.status.items()))


def write_side_effects(path, table: SideEffectTable) -> None:
    write_table(path, ("rank", "protein", "effect", "direction"),
                ((str(r.rank), r.protein, r.effect, r.direction) for r in table.rows))


def write_concordance(path, c: Concordance) -> None:
    rows = [("pearson_all", c.pearson_all), ("spearman_all", c.spearman_all),
            ("direction_pct_all", c.direction_pct_all), ("pearson_masked", c.pearson_masked),
            ("spearman_masked", c.spearman_masked), ("direction_pct_masked", c.direction_pct_masked),
            ("top_n_direction_pct", c.top_n_direction_pct), ("n_masked", str(c.n_masked)),
            ("top_n", str(c.top_n))]
    write_table(path, ("metric", "value"), rows)


def write_divergence(path, table: DivergenceTable) -> None:
    write_table(path, ("threshold", "n_genes", "n_opposite", "n_same", "pct_opposite"),
                ((r.threshold, str(r.n_genes), str(r.n_opposite), str(r.n_same), r.pct_opposite)
                 for r in table.rows))


def write_breakdown(path, breakdown: dict[str, int]) -> None:
    rows = [(k, str(v)) for k, v in breakdown.items()]
    rows.append(("total", str(sum(breakdown.values()))))
    write_table(path, ("group", "parameters"), rows)
