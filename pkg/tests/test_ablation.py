import pytest

from hsfuse.ablation import AXES, LOSS_TERM_ROWS, ablate, format_rows, grid
from hsfuse.config import RunConfig
from hsfuse.data_io import SynthConfig, synth_scene
from hsfuse.diffusion import FUSION_STRATEGIES
from hsfuse.errors import ConfigError
from hsfuse.model import FusionModel, count_parameters
from hsfuse.text.manifest import generic_manifest

from helpers import tiny_config


def test_every_axis_expands_to_valid_configs():
    cfg = RunConfig.toy()
    for axis in AXES:
        rows = grid(axis, cfg, raw_bands=32)
        assert rows
        for _, sub in rows:
            sub.validate()


def test_fusion_axis_covers_all_strategies():
    assert [label for label, _ in grid("fusion_strategy", RunConfig.toy())] == list(FUSION_STRATEGIES)


def test_loss_term_rows_keep_ratio_and_sum_to_one():
    rows = grid("loss_terms", RunConfig.toy())
    assert [label for label, _ in rows] == ["C", "C+N", "C+M", "C+N+M"]
    for (_, sub), (_, lam) in zip(rows, LOSS_TERM_ROWS):
        assert sub.lambdas == lam
        active = [v for v in lam if v]
        # included terms keep the 3:1:1 default ratio
        assert active[0] / sum(active) == pytest.approx(0.6 / (0.6 + 0.2 * (len(active) - 1)))


def test_refiner_depth_parameter_counts_increase():
    counts = [count_parameters(FusionModel(sub, 6)) for _, sub in grid("e_grid", RunConfig.toy())]
    assert len(counts) == 5
    steps = [b - a for a, b in zip(counts, counts[1:])]
    assert all(s > 0 for s in steps) and len(set(steps)) == 1


def test_dim_grid_respects_raw_bands():
    assert [label for label, _ in grid("dim_grid", RunConfig.toy(), raw_bands=10)] == ["d=4", "d=8"]


def test_unknown_axis():
    with pytest.raises(ConfigError) as info:
        grid("depth", RunConfig.toy())
    assert info.value.field == "axis"


def test_tiny_ablation_run():
    raw = synth_scene(SynthConfig(M=24, N=24, D=8, C=3, min_pixels=30), 0)
    cfg = tiny_config(epochs=1, train_per_class=2, d=4)
    rows = ablate(cfg, "dim_grid", raw, generic_manifest(raw.class_names))
    assert [r.setting for r in rows] == ["d=4", "d=8"]
    assert rows[0].parameters < rows[1].parameters
    table = format_rows("dim_grid", rows)
    assert table.count("\n") == 4 and "Kappa" in table
