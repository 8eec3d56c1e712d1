import numpy as np
import pytest

import hmpe.pipeline as pipeline
from hmpe.pipeline import (
    GradcheckInstance,
    compute_pipeline,
    gradcheck,
    hot_query_in_box,
    random_scene_config,
    require_passed,
    run_pipeline,
)
from hmpe.utils.artifacts import MANIFEST_NAME, ArtifactStore
from hmpe.utils.config import PipelineConfig
from hmpe.utils.errors import DomainError, StageError, VerificationError

EXPECTED_FILES = {
    "config.txt", "activations.hmpt", "image.hmpt", "lsconv_activations.hmpt", "lsconv_penalty.txt",
    "class_head.hmpt", "class_head.txt", "bbox_head.hmpt", "bbox_head.txt",
    "h_class.hmpt", "h_bbox.hmpt", "h_mixed.hmpt", "mask_heat.hmpt", "mask.hmpt", "pe.hmpt",
    "k_enc.hmpt", "v_enc.hmpt", "attn_weights.hmpt", "queries.hmpt", "query_scores.hmpt",
    "query_cells.hmpt", "cost_report.txt", "h_class.ppm", "h_bbox.ppm", "h_mixed.ppm",
    "mask.ppm", "overlay.ppm",
}


def test_pipeline_writes_every_artifact(tmp_path, small_config):
    root = run_pipeline(small_config, tmp_path / "run")
    files = set(ArtifactStore(root).files())
    layers = {f"decoder_layer_{i}.hmpt" for i in range(1, small_config.layers + 1)}
    assert files == EXPECTED_FILES | layers
    assert (root / MANIFEST_NAME).exists()
    ArtifactStore(root).verify()


def test_pipeline_is_reproducible(tmp_path, small_config):
    first = run_pipeline(small_config, tmp_path / "a")
    second = run_pipeline(small_config, tmp_path / "b")
    assert (first / MANIFEST_NAME).read_bytes() == (second / MANIFEST_NAME).read_bytes()


def test_decoder_depth_leaves_upstream_artifacts_untouched(tmp_path, small_config):
    shallow = ArtifactStore(run_pipeline(small_config.updated(layers=3), tmp_path / "l3")).hashes()
    deep = ArtifactStore(run_pipeline(small_config.updated(layers=8), tmp_path / "l8")).hashes()
    for name, digest in shallow.items():
        if name not in ("config.txt", "cost_report.txt"):
            assert deep[name] == digest, name
    assert "decoder_layer_8.hmpt" in deep


def test_compute_pipeline_stops_after_a_stage(small_config):
    state = compute_pipeline(small_config, until="mask_pe")
    assert "pe" in state and "encoded" not in state
    with pytest.raises(DomainError):
        compute_pipeline(small_config, until="nowhere")


def test_stage_failures_are_wrapped(monkeypatch, small_config):
    def broken(*args, **kwargs):
        raise DomainError("no scene today")

    monkeypatch.setattr(pipeline, "synth", broken)
    with pytest.raises(StageError) as err:
        compute_pipeline(small_config)
    assert err.value.stage == "scene"
    assert isinstance(err.value.__cause__, DomainError)


def test_strict_threshold_still_keeps_a_query_in_the_box():
    assert hot_query_in_box(PipelineConfig(tau=0.99))


def test_hot_queries_land_in_the_box_for_most_seeds():
    base = PipelineConfig()
    hits = sum(hot_query_in_box(random_scene_config(base, seed)) for seed in range(100))
    assert hits >= 95


def test_random_scene_config_is_seeded():
    base = PipelineConfig()
    assert random_scene_config(base, 4) == random_scene_config(base, 4)
    assert random_scene_config(base, 4).target != random_scene_config(base, 5).target


def test_gradcheck_passes_on_hundred_trials():
    result = gradcheck(seed=0, trials=100, progress=False)
    assert len(result.report) == 6
    assert (result.report["elements"] > 0).all()
    assert result.passed, result.report
    assert result.worst is None
    require_passed(result)


def test_gradcheck_rejects_zero_trials():
    with pytest.raises(DomainError):
        gradcheck(seed=0, trials=0)


def test_failed_gradcheck_dumps_the_worst_instance(tmp_path, monkeypatch):
    monkeypatch.setattr(
        GradcheckInstance, "max_rel_error", lambda self, head, order: (1.0 if order == 1 else 0.0, 1)
    )
    result = gradcheck(seed=0, trials=2, progress=False)
    assert not result.passed
    with pytest.raises(VerificationError):
        require_passed(result)
    store = ArtifactStore(tmp_path)
    result.dump_worst(store)
    assert store.read_sidecar("worst_instance.txt")["order"] == "1"
    assert store.read_tensor("worst_activations").shape == (2, 3, 3)


def test_gradcheck_instances_are_seeded():
    a = GradcheckInstance.draw(1, 2)
    b = GradcheckInstance.draw(1, 2)
    np.testing.assert_array_equal(a.activations, b.activations)
    assert a.target == b.target


def test_mask_thresholds_the_selected_heatmap_by_default(small_config):
    state = compute_pipeline(small_config, until="mask_pe")
    np.testing.assert_array_equal(state["mask_heat"], state["triplet"].h_mixed)
    expected = (np.asarray(state["triplet"].h_mixed, dtype=np.float64) > small_config.tau).astype(np.float32)
    np.testing.assert_array_equal(state["mask"].mask, expected)


def test_mask_heat_pyramid_skips_scales_that_do_not_divide(rng):
    heat = rng.uniform((6, 6))
    cfg = PipelineConfig(height=6, width=6, scales=(1, 2, 4))
    fused = pipeline.mask_heat(cfg, heat)
    direct = pipeline.mask_heat(cfg.updated(scales="1,2"), heat)
    np.testing.assert_array_equal(fused, direct)
    assert fused.shape == (6, 6)
    assert fused.min() == 0.0 and fused.max() == 1.0
    np.testing.assert_array_equal(pipeline.mask_heat(cfg.updated(scales="1,4"), heat), heat)
