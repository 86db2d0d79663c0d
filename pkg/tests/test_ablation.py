import numpy as np
import pytest

from sketchret.ablation import (ABLATION_TABLE, LOSS_ORDER, AblationRow, format_table,
                                loss_flags, modules_implied, plan_for_row, run_ablation,
                                save_results, sign_test_greater, sweep_tradeoffs)
from sketchret.errors import UsageError
from sketchret.training import TrainConfig

# The checkmark matrix, re-stated independently: (modules, losses) per row.
# Module order: E1 E2 C_id_s C_id_t C_att C_d.
# Loss order:   id_s id_t tri_s tri_t att_s att_t dom con.
EXPECTED = {
    1: ("110000", "00000000"),
    2: ("111010", "10101000"),
    3: ("110100", "01010000"),
    4: ("111111", "11111111"),
    5: ("111111", "11111111"),
    6: ("111100", "11110000"),
    7: ("111110", "11111000"),
    8: ("111101", "11110010"),
    9: ("111101", "11111010"),
    10: ("111111", "11111110"),
    11: ("111111", "11111011"),
    12: ("111110", "11111101"),
    13: ("111111", "11111111"),
}


def test_matrix_matches_hardcoded_checkmarks():
    assert set(ABLATION_TABLE) == set(range(1, 14))
    for row_id, (mods, losses) in EXPECTED.items():
        row = ABLATION_TABLE[row_id]
        assert row.modules == tuple(c == "1" for c in mods), f"row {row_id} modules"
        assert row.losses == tuple(c == "1" for c in losses), f"row {row_id} losses"


def test_fractions_and_data_tags():
    assert ABLATION_TABLE[4].target_fraction == 0.5
    assert ABLATION_TABLE[5].target_fraction == 0.8
    assert ABLATION_TABLE[13].target_fraction == 1.0
    assert ABLATION_TABLE[1].training_data == "none"
    assert ABLATION_TABLE[2].training_data == "source"
    assert ABLATION_TABLE[3].training_data == "target"


def test_plan_row6_only_identity_and_triplet():
    plan, toggles = plan_for_row(ABLATION_TABLE[6])
    assert plan.do_step1 and plan.do_step2
    assert toggles.id_s and toggles.tri_s and toggles.id_t and toggles.tri_t
    assert not (toggles.att_s or toggles.att_t or toggles.con_t or toggles.dom)
    assert not toggles.step2_att_s


def test_plan_row7_attributes_pretrain_only():
    _, toggles = plan_for_row(ABLATION_TABLE[7])
    assert toggles.att_s and not toggles.step2_att_s


def test_plan_row9_keeps_source_attributes_in_step2():
    _, toggles = plan_for_row(ABLATION_TABLE[9])
    assert toggles.att_s and toggles.step2_att_s and toggles.dom
    assert not (toggles.att_t or toggles.con_t)


def test_plan_row1_no_training():
    plan, _ = plan_for_row(ABLATION_TABLE[1])
    assert not plan.do_step1 and not plan.do_step2


def test_plan_row13_everything():
    plan, toggles = plan_for_row(ABLATION_TABLE[13])
    assert plan.do_step1 and plan.do_step2 and plan.target_fraction == 1.0
    assert all((toggles.id_s, toggles.tri_s, toggles.att_s, toggles.id_t, toggles.tri_t,
                toggles.att_t, toggles.con_t, toggles.dom, toggles.step2_att_s))


def test_modules_implied_cover_active_losses():
    for row in ABLATION_TABLE.values():
        implied = modules_implied(row)
        l = loss_flags(row)
        assert implied["c_att"] == (l["att_s"] or l["att_t"] or l["con"])
        assert implied["c_d"] == l["dom"]
    # the printed row-9 module column omits the attribute head that its own
    # source-attribute checkmark requires; the implied set corrects that
    assert modules_implied(ABLATION_TABLE[9])["c_att"]
    assert not ABLATION_TABLE[9].modules[4]


def test_sign_test_exact_values():
    assert sign_test_greater([1, 1, 1, 1, 1]) == pytest.approx(1 / 32)
    assert sign_test_greater([1, 1, 1, 1, -1]) == pytest.approx(6 / 32)
    assert sign_test_greater([-1, -1]) == pytest.approx(1.0)
    assert sign_test_greater([0, 0, 1]) == pytest.approx(0.5)
    assert sign_test_greater([]) == 1.0


def _fast_config():
    return TrainConfig(epochs_step1=1, epochs_step2=1, batch_source=12, ids_per_batch=4,
                       batch_pairs=4, batch_source_step2=8, ids_per_batch_step2=4,
                       base_lr=1e-3, warmup_epochs=0, hidden=(16,), embedding_dim=8,
                       head_hidden=16)


def test_run_ablation_unknown_row(tiny_corpus):
    with pytest.raises(UsageError, match="row"):
        run_ablation(tiny_corpus, [99], [0], _fast_config())


def test_run_ablation_shapes_and_persistence(tiny_corpus, tmp_path):
    res = run_ablation(tiny_corpus, [1, 3], [0, 1], _fast_config())
    assert set(res.rows) == {1, 3}
    for row in res.rows.values():
        assert len(row["per_seed"]) == 2
        assert 0.0 <= row["mean_r1"] <= 1.0
    save_results(res, tmp_path / "ablation.json")
    assert (tmp_path / "ablation.json").exists()
    table = format_table(res)
    assert "description" in table and len(table.strip().split("\n")) == 3


def test_run_ablation_row4_uses_half_identities(tiny_corpus):
    from sketchret.training import RunPlan, run_pipeline
    from dataclasses import replace
    plan, toggles = plan_for_row(ABLATION_TABLE[4])
    assert plan.target_fraction == 0.5
    cfg = replace(_fast_config(), toggles=toggles)
    res = run_pipeline(tiny_corpus, cfg, plan)
    assert len(res.target_identities) == 3  # 50% of the 6 training identities


def test_sweep_run_counts_and_annihilation(tiny_corpus):
    grid = (0.05, 0.5)
    res = sweep_tradeoffs(tiny_corpus, grid, [0], _fast_config(),
                          lambdas=("lambda2", "lambda3"))
    assert set(res.curves) == {"lambda2", "lambda3"}
    for curve in res.curves.values():
        assert set(curve) == {0.05, 0.5}
        for stats in curve.values():
            assert len(stats["per_seed"]) == 1
    with pytest.raises(UsageError):
        sweep_tradeoffs(tiny_corpus, (0.0, 1.0), [0], _fast_config())


def test_step1_cache_reuse_is_bit_identical(tiny_corpus):
    cfg = _fast_config()
    cache = {}
    a = run_ablation(tiny_corpus, [6], [0], cfg, step1_cache=cache)
    assert len(cache) == 1
    b = run_ablation(tiny_corpus, [6], [0], cfg, step1_cache=cache)  # hits the cache
    assert a.rows[6]["per_seed"] == b.rows[6]["per_seed"]
    c = run_ablation(tiny_corpus, [6], [0], cfg)  # no cache
    assert a.rows[6]["per_seed"] == c.rows[6]["per_seed"]
