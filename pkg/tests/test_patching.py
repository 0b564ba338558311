import numpy as np
import pytest

from app.errors import AlignmentError, BaselineError, ComputeError, ConfigError, PathOrderError
from app.models import PatchGrid, SweepSpec
from app.services.gpt2 import HookPoint
from app.services.metrics import answer_pair
from app.services.patching import (
    PatchingBaseline,
    PatchJob,
    PathSender,
    average_grids,
    component_dominance,
    head_scores,
    noised_score,
    normalized_score,
    patch_block_sweep,
    patch_head_component_sweep,
    patch_head_sweep,
    patch_joint,
    patch_path_sweep,
    patch_resid_sweep,
    path_patch,
)
from app.services.sweep_runner import CellStatus, SweepRunner, SweepTracker

CLEAN = " Mary met John. She"
CORRUPTED = " Mike met John. He"


def _job(tokenizer, direction="denoise", spec=None) -> PatchJob:
    return PatchJob(
        clean=tokenizer.encode(CLEAN).ids,
        corrupted=tokenizer.encode(CORRUPTED).ids,
        pair=answer_pair(tokenizer, "Yes", "No"),
        direction=direction,
        spec=spec or SweepSpec(),
    )


@pytest.fixture
def baseline(tokenizer, toy_weights, toy_config):
    return PatchingBaseline(_job(tokenizer), toy_weights, toy_config)


@pytest.fixture
def quiet():
    return SweepRunner(progress=False)


def test_scores_are_normalized():
    assert normalized_score(2.0, 2.0, 0.0) == 1.0
    assert normalized_score(0.0, 2.0, 0.0) == 0.0
    assert normalized_score(1.0, 3.0, -1.0) == 0.5
    assert noised_score(2.0, 2.0, 0.0) == 0.0
    with pytest.raises(BaselineError):
        normalized_score(1.0, 1.0, 1.0)


def test_unaligned_job_is_rejected(tokenizer):
    with pytest.raises(AlignmentError):
        PatchJob(clean=tokenizer.encode(CLEAN).ids, corrupted=tokenizer.encode(" Zebra met John. He").ids,
                 pair=answer_pair(tokenizer, "Yes", "No"))


def test_identical_prompts_have_no_baseline(tokenizer, toy_weights, toy_config):
    ids = tokenizer.encode(CLEAN).ids
    job = PatchJob(clean=ids, corrupted=list(ids), pair=answer_pair(tokenizer, "Yes", "No"))
    with pytest.raises(BaselineError):
        PatchingBaseline(job, toy_weights, toy_config)


def test_denoise_endpoints(baseline):
    assert baseline.run_overrides([]) == 0.0
    assert patch_joint(baseline, [HookPoint(0, "resid_pre")]) == pytest.approx(1.0, abs=1e-6)


def test_noise_endpoints(tokenizer, toy_weights, toy_config):
    noised = PatchingBaseline(_job(tokenizer, "noise"), toy_weights, toy_config)
    assert noised.run_overrides([]) == 0.0
    assert patch_joint(noised, [HookPoint(0, "resid_pre")]) == pytest.approx(1.0, abs=1e-6)


def test_resid_sweep_grid(baseline, quiet):
    spec = SweepSpec(site="resid", full_row=True)
    grid = patch_resid_sweep(baseline, spec, quiet)
    n_layers, seq = baseline.config.n_layers, baseline.seq_len
    assert grid.name == "resid_pre"
    assert grid.axes["layer"] == [str(layer) for layer in range(n_layers)]
    assert grid.axes["position"][-1] == "all"
    assert len(grid.values) == n_layers
    assert all(len(row) == seq + 1 for row in grid.values)
    assert grid.values[0][-1] == pytest.approx(1.0, abs=1e-6)
    # positions where both prompts hold the same token carry nothing at layer 0
    same = [p for p in range(seq) if baseline.job.clean[p] == baseline.job.corrupted[p]]
    assert same and all(abs(grid.values[0][p]) < 1e-9 for p in same)


def test_resid_sweep_respects_ranges_and_labels(baseline, quiet):
    spec = SweepSpec(site="resid", layers=(1, 2), positions=(1, 3))
    grid = patch_resid_sweep(baseline, spec, quiet, position_labels=[f"t{i}" for i in range(baseline.seq_len)])
    assert grid.axes == {"layer": ["1"], "position": ["t1", "t2"]}
    with pytest.raises(ConfigError):
        patch_resid_sweep(baseline, SweepSpec(layers=(0, 9)), quiet)


def test_parallel_sweep_matches_serial(baseline):
    serial = patch_resid_sweep(baseline, SweepSpec(), SweepRunner(workers=1, progress=False))
    parallel = patch_resid_sweep(baseline, SweepSpec(), SweepRunner(workers=4, progress=False))
    assert np.allclose(serial.values, parallel.values, atol=1e-9)


def test_block_and_head_sweeps(baseline, quiet):
    block = patch_block_sweep(baseline, SweepSpec(site="block"), quiet)
    assert block.axes["site"] == ["attn_out", "mlp_out"]
    assert len(block.values) == baseline.config.n_layers

    heads = patch_head_sweep(baseline, SweepSpec(site="head"), quiet)
    assert heads.name == "attn_z"
    assert np.asarray(heads.values).shape == (baseline.config.n_layers, baseline.config.n_heads)


def test_head_component_sweep_returns_four_grids(baseline, quiet):
    grids = patch_head_component_sweep(baseline, SweepSpec(site="head_components", pattern_mode="end"), quiet)
    assert list(grids) == ["attn_q", "attn_k", "attn_v", "attn_pattern"]
    for grid in grids.values():
        assert np.asarray(grid.values).shape == (baseline.config.n_layers, baseline.config.n_heads)
        assert all(np.isfinite(x) for row in grid.values for x in row)


def test_path_patching_all_senders_equals_direct_query_patch(baseline):
    senders = [("embed",), (0, 0), (0, 1), ("mlp", 0)]
    receiver = HookPoint(1, "attn_q", 0)
    through_paths = path_patch(baseline, senders, receiver)
    direct = baseline.patch([receiver])
    assert through_paths == pytest.approx(direct, abs=1e-3)


def test_path_patching_single_sender(baseline):
    score = path_patch(baseline, (0, 1), HookPoint(1, "attn_v", 1))
    assert np.isfinite(score)


def test_path_patching_order_and_receiver_checks(baseline):
    with pytest.raises(PathOrderError):
        path_patch(baseline, (1, 0), HookPoint(1, "attn_k", 0))
    with pytest.raises(PathOrderError):
        path_patch(baseline, [("mlp", 1)], HookPoint(1, "attn_q", 1))
    with pytest.raises(ConfigError):
        path_patch(baseline, (0, 0), HookPoint(1, "attn_z", 0))
    with pytest.raises(ConfigError):
        path_patch(baseline, [], HookPoint(1, "attn_q", 0))


def test_path_sender_forms():
    assert PathSender.of((3, 4)) == PathSender("head", 3, 4)
    assert PathSender.of(("mlp", 2)) == PathSender("mlp", 2)
    assert PathSender.of(("embed",)) == PathSender("embed")


def _grid(values, name="attn_z") -> PatchGrid:
    return PatchGrid(name=name, axes={"layer": ["0", "1"], "head": ["0", "1"]}, values=values)


def test_average_grids():
    mean = average_grids([_grid([[0.0, 1.0], [2.0, 3.0]]), _grid([[1.0, 1.0], [0.0, 1.0]])])
    assert mean.values == [[0.5, 1.0], [1.0, 2.0]]
    assert mean.n_pairs == 2
    other = PatchGrid(name="attn_z", axes={"layer": ["0"], "head": ["0", "1"]}, values=[[0.0, 0.0]])
    with pytest.raises(AlignmentError):
        average_grids([_grid([[0.0, 0.0], [0.0, 0.0]]), other])
    with pytest.raises(ConfigError):
        average_grids([])


def test_patch_grid_rejects_non_finite_scores():
    with pytest.raises(ValueError):
        _grid([[0.0, float("nan")], [0.0, 0.0]])


@pytest.mark.asyncio
async def test_runner_keeps_cell_order():
    runner = SweepRunner(workers=3, progress=False)
    results = await runner.run_async([lambda i=i: float(i * i) for i in range(10)])
    assert results == [float(i * i) for i in range(10)]


@pytest.mark.asyncio
async def test_runner_propagates_cell_failures():
    def broken() -> float:
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        await SweepRunner(workers=2, progress=False).run_async([lambda: 1.0, broken])


def test_tracker_counts():
    tracker = SweepTracker(3)
    tracker.set(0, CellStatus.COMPLETED)
    tracker.set(1, CellStatus.FAILED)
    assert tracker.counts() == {"pending": 1, "running": 0, "completed": 1, "failed": 1}
    assert tracker.get(1) == CellStatus.FAILED


def test_patching_every_head_equals_patching_the_attention_output(baseline, toy_config):
    for layer in range(toy_config.n_layers):
        heads = [HookPoint(layer, "attn_z", h) for h in range(toy_config.n_heads)]
        assert patch_joint(baseline, heads) == pytest.approx(
            patch_joint(baseline, [HookPoint(layer, "attn_out")]), abs=1e-3)


def test_repeated_sweeps_are_identical(baseline, quiet):
    first = patch_head_sweep(baseline, runner=quiet)
    assert patch_head_sweep(baseline, runner=quiet).values == first.values


class _NanRunner:
    def run(self, cells):
        return [float("nan")] * len(cells)


def test_non_finite_sweep_scores_are_a_compute_error(baseline):
    with pytest.raises(ComputeError):
        patch_block_sweep(baseline, runner=_NanRunner())


def test_path_sweep_grid(baseline, quiet):
    spec = SweepSpec(site="path", receivers=["1.0", "1.1"], receiver_site="attn_k")
    grid = patch_path_sweep(baseline, spec, quiet)
    assert grid.name == "path_attn_k"
    assert grid.axes == {"sender": ["0.0", "0.1"], "receiver": ["1.0", "1.1"]}
    assert grid.values[1][0] == pytest.approx(path_patch(baseline, (0, 1), HookPoint(1, "attn_k", 0)), abs=1e-6)
    assert grid.values[0][1] == pytest.approx(path_patch(baseline, (0, 0), HookPoint(1, "attn_k", 1)), abs=1e-6)


def test_path_sweep_receiver_checks(baseline, quiet):
    with pytest.raises(ValueError):
        SweepSpec(site="path")
    with pytest.raises(ValueError):
        SweepSpec(site="path", receivers=["9"])
    with pytest.raises(ValueError):
        SweepSpec(site="path", receivers=["1.0", "1.0"])
    with pytest.raises(ConfigError):
        patch_path_sweep(baseline, SweepSpec(site="path", receivers=["0.1"]), quiet)
    with pytest.raises(ConfigError):
        patch_path_sweep(baseline, SweepSpec(site="path", receivers=["5.0"]), quiet)
    # senders must sit below the earliest receiver
    with pytest.raises(ConfigError):
        patch_path_sweep(baseline, SweepSpec(site="path", receivers=["1.0"], layers=(0, 2)), quiet)


def _late_heads(name, values) -> PatchGrid:
    return PatchGrid(name=name, axes={"layer": ["9", "10", "11"], "head": ["0", "1"]}, values=values)


def test_head_scores_flatten_the_grid():
    scores = head_scores(_late_heads("attn_z", [[0.5, 0.0], [0.3, -0.4], [0.0, 0.1]]))
    assert scores["10.1"] == -0.4
    assert list(scores)[:3] == ["9.0", "9.1", "10.0"]


def test_component_dominance_flags_heads_where_value_is_not_largest():
    ranking = _late_heads("attn_z", [[0.5, 0.0], [0.3, -0.4], [0.0, 0.1]])
    components = {
        "attn_v": _late_heads("attn_v", [[0.6, 0.0], [0.2, -0.5], [0.0, 0.05]]),
        "attn_q": _late_heads("attn_q", [[0.1, 0.0], [0.25, 0.1], [0.0, 0.2]]),
        "attn_k": _late_heads("attn_k", [[0.0, 0.0], [0.05, -0.2], [0.0, 0.01]]),
    }
    report = component_dominance(ranking, components, top_k=2, min_layer=10)
    assert [c.head for c in report.heads] == ["10.0", "10.1"]
    assert report.heads[1].value == 0.5 and report.heads[1].key == 0.2
    assert report.violations == ["10.0"]
    assert not report.holds
    dumped = report.model_dump()
    assert dumped["holds"] is False
    assert [h["value_dominates"] for h in dumped["heads"]] == [False, True]


def test_component_dominance_holds_when_value_leads():
    ranking = _late_heads("attn_z", [[0.5, 0.0], [0.3, -0.4], [0.0, 0.1]])
    value = _late_heads("attn_v", [[0.9, 0.1], [0.8, -0.7], [0.1, 0.3]])
    small = _late_heads("attn_q", [[0.1, 0.0], [0.1, 0.1], [0.0, 0.05]])
    report = component_dominance(ranking, {"attn_v": value, "attn_q": small, "attn_k": small},
                                 top_k=1, min_layer=9)
    assert [c.head for c in report.heads] == ["9.0", "10.1"]
    assert report.holds and report.source == "patch attn_z"


def test_component_dominance_needs_all_three_grids():
    ranking = _late_heads("attn_z", [[0.5, 0.0], [0.3, -0.4], [0.0, 0.1]])
    with pytest.raises(ConfigError):
        component_dominance(ranking, {"attn_v": ranking}, top_k=2, min_layer=9)
