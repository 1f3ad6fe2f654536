import numpy as np
import pytest
from conftest import closed_form_count

from cdt3 import autodiff as ad
from cdt3.model import (
    ABSENT,
    ATTENTION_MAPS,
    LOADED,
    MISMATCH,
    SINGLE_STAGE,
    ConfigError,
    ModelConfig,
    ModelState,
    build_model,
    capture_attention,
    checkpoint_bytes,
    count_parameters,
    expected_attention_shapes,
    full_forward,
    load_checkpoint,
    parameter_breakdown,
    parameter_shapes,
    parse_checkpoint,
    planned_breakdown,
    save_checkpoint,
    transfer_weights,
    vce_c_forward,
    vce_n_forward,
)
from cdt3.tensorio import FormatError

PAPER_TOTAL = 30_987_766


class Cell:
    def __init__(self, cfg, seed=0, zero=False):
        rng = np.random.default_rng(seed)
        self.dna = rng.normal(size=(cfg.n_bins, cfg.d_dna))
        self.x_rna = np.zeros(cfg.n_genes) if zero else rng.normal(size=cfg.n_genes)
        self.x_prot = np.zeros(cfg.n_prot) if zero else rng.normal(size=cfg.n_prot)


DESK = ModelConfig.desk()


# ---------------------------------------------------------------- config


def test_config_rejects_heads_not_dividing_width():
    with pytest.raises(ConfigError, match="heads"):
        ModelConfig.desk(d=30, heads=4)
    with pytest.raises(ConfigError, match="dropout"):
        ModelConfig.desk(dropout=-0.1)
    with pytest.raises(ConfigError, match="lambda_prot"):
        ModelConfig.desk(lambda_prot=-1.0)
    with pytest.raises(ConfigError):
        ModelConfig.desk(n_genes=0)


# ---------------------------------------------------------------- parameters


def test_full_size_count_within_five_percent():
    cfg = ModelConfig.paper()
    total = sum(planned_breakdown(cfg).values())
    assert abs(total - PAPER_TOTAL) / PAPER_TOTAL <= 0.05
    assert total == closed_form_count(896, 3072, 2361, 189, 512, 2048, 1024)


def test_full_size_build_matches_plan():
    state = build_model(ModelConfig.paper())
    assert count_parameters(state) == sum(planned_breakdown(state.config).values())
    assert parameter_breakdown(state) == planned_breakdown(state.config)


@pytest.mark.parametrize("variant,stage1", [("two_stage", False), ("two_stage", True), (SINGLE_STAGE, False)])
def test_desk_count_matches_closed_form(variant, stage1):
    cfg = DESK.replace(architecture_variant=variant)
    state = build_model(cfg, stage1_only=stage1)
    expect = closed_form_count(64, 48, 50, 16, 32, 64, 64, fusion_inputs=3 if variant == SINGLE_STAGE else 2,
                               stage1=stage1)
    assert count_parameters(state) == expect


def test_count_of_single_tensor():
    assert count_parameters(ModelState({"w": np.zeros((2, 3))}, DESK)) == 6


def test_breakdown_groups_sum_to_total():
    state = build_model(DESK)
    bd = parameter_breakdown(state)
    assert sum(bd.values()) == count_parameters(state)
    assert {"vce_n.dna_sa.0", "vce_n.dna_sa.1", "vce_n.fusion", "vce_c.prot_head"} <= set(bd)


def test_build_is_deterministic_and_seeded():
    a, b, c = build_model(DESK, 3), build_model(DESK, 3), build_model(DESK, 4)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_initialization_scheme():
    state = build_model(DESK, 0)
    for name, v in state.params.items():
        if name.endswith(".gain"):
            assert np.all(v == 1.0)
        elif v.ndim == 1:
            assert np.all(v == 0.0)
        else:
            limit = np.sqrt(6.0 / (v.shape[0] + v.shape[1]))
            assert np.abs(v).max() <= limit


def test_stage_one_tensors_are_a_prefix_of_the_full_layout():
    full = parameter_shapes(DESK)
    s1 = parameter_shapes(DESK, stage1_only=True)
    assert all(full[k] == v for k, v in s1.items())
    assert all(k.startswith("vce_n.") for k in s1)


# ---------------------------------------------------------------- forward


def test_forward_shapes_and_finiteness():
    state = build_model(DESK, 0)
    fo = full_forward(state, Cell(DESK))
    assert fo.y_hat_rna.shape == (50,) and fo.y_hat_prot.shape == (16,)
    assert fo.e_rna.shape == (32,) and fo.e_prot.shape == (32,) and fo.rna_tokens.shape == (50, 32)


def test_zero_expression_inputs_stay_finite():
    state = build_model(DESK, 0)
    fo = full_forward(state, Cell(DESK, zero=True))
    assert np.isfinite(fo.y_hat_rna).all() and np.isfinite(fo.y_hat_prot).all()


def test_attention_bundle_inventory():
    state = build_model(DESK, 0)
    bundle = capture_attention(state, Cell(DESK))
    assert len(bundle) == 6 and set(bundle.maps) == set(ATTENTION_MAPS)
    assert bundle.shapes() == expected_attention_shapes(DESK)
    assert bundle["prot_sa"].shape == (4, 16, 16)
    for m in bundle.maps.values():
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-5)


def test_full_size_attention_shapes():
    shapes = expected_attention_shapes(ModelConfig.paper())
    assert shapes["prot_sa"] == (8, 189, 189)
    assert shapes["dna2rna"] == (8, 2361, 896)


def test_cell_and_head_averaging_commute():
    state = build_model(DESK, 0)
    maps = np.stack([capture_attention(state, Cell(DESK, s))["dna2rna"] for s in range(3)]).astype(np.float64)
    np.testing.assert_allclose(maps.mean(axis=0).mean(axis=0), maps.mean(axis=1).mean(axis=0), rtol=1e-12)


def test_forward_is_deterministic():
    state = build_model(DESK, 0)
    a, b = full_forward(state, Cell(DESK)), full_forward(state, Cell(DESK))
    assert a.e_rna.tobytes() == b.e_rna.tobytes() and a.y_hat_prot.tobytes() == b.y_hat_prot.tobytes()


def test_stage_forwards_compose_to_full_forward():
    state = build_model(DESK, 0)
    cell = Cell(DESK)
    e_rna, y_rna, tokens, b1 = vce_n_forward(state, cell.dna, cell.x_rna)
    e_prot, y_prot, b2 = vce_c_forward(state, e_rna, tokens, cell.x_prot)
    fo = full_forward(state, cell)
    np.testing.assert_array_equal(fo.y_hat_rna, y_rna)
    np.testing.assert_array_equal(fo.y_hat_prot, y_prot)
    assert set(b1.maps) | set(b2.maps) == set(ATTENTION_MAPS)


def test_rna_tokens_drive_protein_output():
    state = build_model(DESK, 0)
    cell = Cell(DESK)
    e_rna, _, tokens, _ = vce_n_forward(state, cell.dna, cell.x_rna)
    base = vce_c_forward(state, e_rna, tokens, cell.x_prot)[1]
    bumped = tokens.copy()
    bumped[3] += 0.5
    assert not np.array_equal(base, vce_c_forward(state, e_rna, bumped, cell.x_prot)[1])


def test_wrong_input_shape_is_a_dimension_error():
    state = build_model(DESK, 0)
    cell = Cell(DESK)
    cell.dna = cell.dna[:10]
    with pytest.raises(ad.DimensionError, match="dna"):
        full_forward(state, cell)


def test_protein_stage_does_not_change_rna_prediction():
    s1 = build_model(DESK, 5, stage1_only=True)
    full, _ = transfer_weights(s1, DESK, seed=9)
    cell = Cell(DESK)
    assert full_forward(s1, cell).y_hat_rna.tobytes() == full_forward(full, cell).y_hat_rna.tobytes()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    state = build_model(DESK, 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path, DESK)
    assert back.config == state.config and back.seed == 2
    assert checkpoint_bytes(back) == path.read_bytes()
    for k in state.params:
        assert back.params[k].tobytes() == state.params[k].tobytes()


def test_truncated_checkpoint_is_rejected():
    data = checkpoint_bytes(build_model(DESK, 0))
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            parse_checkpoint(data[:cut])
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(data + b"\0")


def test_loading_into_mismatched_config_lists_offenders(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(DESK, 0), path)
    with pytest.raises(FormatError) as err:
        load_checkpoint(path, DESK.replace(n_genes=49))
    msg = str(err.value)
    assert "vce_n.rna_enc.embedding" in msg and "vce_n.rna_head.fc2.weight" in msg
    assert "vce_c.prot_enc.embedding" not in msg


# ---------------------------------------------------------------- transfer


def test_transfer_into_two_stage_is_lossless(tmp_path):
    s1 = build_model(DESK, 1, stage1_only=True)
    path = tmp_path / "s1.ckpt"
    save_checkpoint(s1, path)
    full, rep = transfer_weights(path, DESK, seed=2)
    assert rep.counts[LOADED] == len(s1.params) and rep.fraction_loaded == 1.0
    assert rep.counts[MISMATCH] == 0
    assert set(rep.status) == set(full.params)
    for k, v in s1.params.items():
        assert full.params[k].tobytes() == v.tobytes()


def test_transfer_into_single_stage_flags_the_fusion_layer():
    s1 = build_model(DESK, 1, stage1_only=True)
    full, rep = transfer_weights(s1, DESK.replace(architecture_variant=SINGLE_STAGE), seed=2)
    assert rep.names_with(MISMATCH) == ["vce_n.fusion.fc1.weight"]
    assert rep.groups_with(MISMATCH) == ["vce_n.fusion"]
    assert rep.status["vce_n.dna_sa.0.attn.q.weight"] == LOADED
    assert rep.status["vce_n.xattn_dna2rna.ln_kv.gain"] == LOADED
    assert all(v == ABSENT for k, v in rep.status.items() if k.startswith("vce_c."))


def test_transfer_from_empty_source():
    full, rep = transfer_weights({}, DESK)
    assert rep.counts == {LOADED: 0, MISMATCH: 0, ABSENT: len(full.params)}
    assert rep.fraction_loaded == 0.0
