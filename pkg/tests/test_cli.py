import numpy as np
import pytest

from hmpe.cli import DEFAULT_GRADCHECK_DIR, main
from hmpe.pipeline import GradcheckInstance
from hmpe.utils.plotting import read_image
from hmpe.utils.tensor_io import read_sidecar, read_tensor, write_tensor

SMALL = ["--height", "8", "--width", "8", "--channels", "4", "--scale", "2"]
MODEL = ["--depth", "16", "--heads", "4", "--top-m", "20"]


def test_synth_writes_scene(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3", "--quiet"] + SMALL) == 0
    assert read_tensor(tmp_path / "activations.hmpt").shape == (4, 8, 8)
    assert read_image(tmp_path / "image.ppm").dims == (16, 16)
    assert read_sidecar(tmp_path / "target.txt") == {"seed": "3", "target": "0.5,0.5,0.3,0.3"}


def test_seed_comes_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("HMPE_SEED", "5")
    assert main(["synth", "--out", str(tmp_path), "--quiet"] + SMALL) == 0
    assert read_sidecar(tmp_path / "target.txt")["seed"] == "5"


def test_usage_errors_exit_with_one(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["synth"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["render", "--heatmap", "h.hmpt", "--out", "x.ppm", "--upsample", "cubic"])
    assert err.value.code == 1


def test_invalid_values_exit_with_one(tmp_path):
    assert main(["gradcheck", "--trials", "0", "--quiet"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--tau", "1.0", "--quiet"]) == 1
    assert main(["mask-pe", "--heatmap", str(tmp_path / "absent.hmpt"), "--out", str(tmp_path)]) == 1


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "3", "--out", str(tmp_path), "--quiet"]) == 0
    assert "max_rel_err" in capsys.readouterr().out
    assert (tmp_path / "gradcheck_report.txt").exists()


def test_failing_gradcheck_dumps_without_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(
        GradcheckInstance, "max_rel_error", lambda self, head, order: (1.0 if order == 2 else 0.0, 1)
    )
    assert main(["gradcheck", "--trials", "2", "--quiet"]) == 2
    dump = tmp_path / DEFAULT_GRADCHECK_DIR
    assert read_sidecar(dump / "worst_instance.txt")["order"] == "2"
    assert (dump / "worst_activations.hmpt").exists()


def test_mask_pe_at_zero_tau_masks_every_cold_cell(tmp_path):
    heat = np.zeros((16, 16))
    heat[5, 7] = 0.4
    write_tensor(tmp_path / "h.hmpt", heat)
    args = ["mask-pe", "--heatmap", str(tmp_path / "h.hmpt"), "--tau", "0", "--depth", "8",
            "--out", str(tmp_path / "pe.hmpt"), "--mask-out", str(tmp_path / "mask.hmpt"), "--quiet"]
    assert main(args) == 0
    mask = np.asarray(read_tensor(tmp_path / "mask.hmpt"))
    pe = np.asarray(read_tensor(tmp_path / "pe.hmpt"))
    assert mask.sum() == 1 and mask[5, 7] == 1
    assert pe.shape == (16, 16, 8)
    assert not pe[mask == 0].any()
    assert pe[5, 7].any()


@pytest.mark.parametrize("scales", [None, "1,2,4"])
def test_mask_pe_accepts_grids_not_divisible_by_four(tmp_path, rng, scales):
    write_tensor(tmp_path / "h.hmpt", rng.uniform((6, 6)))
    args = ["mask-pe", "--heatmap", str(tmp_path / "h.hmpt"), "--tau", "0.35", "--depth", "8",
            "--out", str(tmp_path / "pe.hmpt"), "--mask-out", str(tmp_path / "mask.hmpt"), "--quiet"]
    if scales is not None:
        args += ["--scales", scales]
    assert main(args) == 0
    assert read_tensor(tmp_path / "mask.hmpt").shape == (6, 6)


def test_encode_builds_its_own_masked_pe(tmp_path):
    scene, heat, enc, dec = (tmp_path / name for name in ("scene", "heat", "enc", "dec"))
    assert main(["synth", "--out", str(scene), "--quiet"] + SMALL) == 0
    assert main(["gen-heatmap", "--activations", str(scene / "activations.hmpt"),
                 "--out", str(heat), "--quiet"]) == 0
    assert main(["encode", "--class-heat", str(heat / "h_class.hmpt"), "--bbox-heat",
                 str(heat / "h_bbox.hmpt"), "--tau", "0.35", "--depth", "16", "--heads", "4",
                 "--out", str(enc), "--quiet"]) == 0
    assert read_tensor(enc / "k_enc.hmpt").shape == (64, 16)
    assert read_tensor(enc / "pe.hmpt").shape == (8, 8, 16)

    assert main(["mask-pe", "--heatmap", str(heat / "h_mixed.hmpt"), "--tau", "0.35", "--depth", "16",
                 "--out", str(tmp_path / "pe.hmpt"), "--mask-out", str(tmp_path / "mask.hmpt"),
                 "--quiet"]) == 0
    np.testing.assert_array_equal(read_tensor(enc / "mask.hmpt"), read_tensor(tmp_path / "mask.hmpt"))
    np.testing.assert_array_equal(read_tensor(enc / "pe.hmpt"), read_tensor(tmp_path / "pe.hmpt"))

    assert main(["decode", "--mixed-heat", str(heat / "h_mixed.hmpt"), "--enc", str(enc),
                 "--out", str(dec), "--layers", "1", "--quiet"] + MODEL) == 0
    assert (dec / "decoder_layer_1.hmpt").exists()


def test_run_pipeline_then_verify(tmp_path):
    out = tmp_path / "run"
    assert main(["run-pipeline", "--out", str(out), "--quiet"] + SMALL + MODEL) == 0
    assert main(["verify-manifest", "--dir", str(out), "--quiet"]) == 0
    with open(out / "h_mixed.hmpt", "ab") as f:
        f.write(b"\x00")
    assert main(["verify-manifest", "--dir", str(out), "--quiet"]) == 2


def test_lsconv_command(tmp_path, rng):
    feature = write_tensor(tmp_path / "feature.hmpt", rng.normal((8, 8)))
    for axis in ("x", "y", "both"):
        out = tmp_path / f"out_{axis}.hmpt"
        penalty = tmp_path / f"penalty_{axis}.txt"
        args = ["lsconv", "--feature", str(feature), "--axis", axis, "--out", str(out),
                "--penalty-out", str(penalty), "--quiet"]
        assert main(args) == 0
        assert read_tensor(out).shape == (8, 8)
        assert float(read_sidecar(penalty)["penalty"]) >= 0


def test_render_command(tmp_path, rng):
    heat = write_tensor(tmp_path / "heat.hmpt", rng.uniform((4, 4)))
    out = tmp_path / "heat.ppm"
    assert main(["render", "--heatmap", str(heat), "--scale", "3", "--out", str(out), "--quiet"]) == 0
    assert read_image(out).dims == (12 + 16, 12)


def test_subcommands_chain(tmp_path):
    scene, heat, mask, enc, dec = (tmp_path / name for name in ("scene", "heat", "mask", "enc", "dec"))
    assert main(["synth", "--out", str(scene), "--quiet"] + SMALL) == 0
    assert main(["gen-heatmap", "--activations", str(scene / "activations.hmpt"),
                 "--out", str(heat), "--quiet"]) == 0
    assert main(["mask-pe", "--heatmap", str(heat / "h_mixed.hmpt"), "--out", str(mask / "pe.hmpt"),
                 "--mask-out", str(mask / "mask.hmpt"), "--quiet"] + MODEL) == 0
    mask_values = np.asarray(read_tensor(mask / "mask.hmpt"))
    assert set(np.unique(mask_values)) <= {0.0, 1.0}
    assert main(["encode", "--class-heat", str(heat / "h_class.hmpt"), "--bbox-heat",
                 str(heat / "h_bbox.hmpt"), "--pe", str(mask / "pe.hmpt"), "--out", str(enc),
                 "--quiet"] + MODEL) == 0
    assert read_tensor(enc / "v_enc.hmpt").shape == (64, 16)
    assert main(["decode", "--mixed-heat", str(heat / "h_mixed.hmpt"), "--enc", str(enc),
                 "--out", str(dec), "--layers", "2", "--quiet"] + MODEL) == 0
    assert read_tensor(dec / "decoder_layer_2.hmpt").shape[1] == 16
    assert (dec / "cost_report.txt").exists()

    overlay = tmp_path / "overlay.ppm"
    assert main(["render", "--heatmap", str(heat / "h_mixed.hmpt"), "--base", str(scene / "image.ppm"),
                 "--scale", "2", "--out", str(overlay), "--quiet"]) == 0
    assert read_image(overlay).dims == (16 + 16, 16)


def test_ablate_decoder_command(tmp_path):
    out = tmp_path / "ablation.txt"
    args = ["ablate-decoder", "--layers-to", "3", "--out", str(out), "--quiet"] + SMALL + MODEL
    assert main(args) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split()[0] == "layers"
    assert len(lines) == 4
