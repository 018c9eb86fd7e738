"""End-to-end tests of the command-line toolchain on a small scan."""

import json

import numpy as np
import pytest

from helixct import cli
from helixct import metrics_io as mio
from helixct.filters import ramp_taps

BALL = {"ellipsoids": [{"center_mm": [0, 0, 0], "semi_axes_mm": [20, 20, 20],
                        "delta_mu_per_mm": 0.02}]}
GAIN32 = "18.716574"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a phantom file, ground truth, and two sinograms,
    all produced through the CLI itself."""
    d = tmp_path_factory.mktemp("cliws")
    paths = {
        "phantom": d / "ball.json",
        "gt": d / "gt.ctv",
        "clean": d / "clean.cts",
        "noisy": d / "noisy.cts",
        "dir": d,
    }
    paths["phantom"].write_text(json.dumps(BALL))
    assert run("phantom", "--file", paths["phantom"], "--dims", "32,32,32",
               "--pitch-mm", "2", "--origin-mm=-31,-31,-31",
               "--supersample", "2", "--out", paths["gt"]) == 0
    assert run("simulate", "--phantom-file", paths["phantom"],
               "--geometry", "desk32", "--noise-free", "--supersample-uv", "1",
               "--out", paths["clean"]) == 0
    assert run("simulate", "--phantom-file", paths["phantom"],
               "--geometry", "desk32", "--dose", "0.1", "--i0", "100000",
               "--seed", "3", "--supersample-uv", "1",
               "--out", paths["noisy"]) == 0
    return paths


def test_version_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        run("--version")
    assert e.value.code == 0
    assert "helixct" in capsys.readouterr().out


def test_no_command_prints_help_and_fails(capsys):
    assert run() == 1
    assert "command" in capsys.readouterr().err


def test_artifacts_and_manifests_exist(ws):
    for key in ("gt", "clean", "noisy"):
        assert ws[key].exists()
        manifest = json.loads((ws[key].parent / (ws[key].name + ".manifest.json"))
                              .read_text())
        assert manifest["tool"] == "helixct"
        assert str(ws[key]) in manifest["outputs"]
        assert "args" in manifest and "command" in manifest


def test_unknown_phantom_is_a_usage_error(ws, capsys):
    assert run("phantom", "--name", "nope", "--out", ws["dir"] / "x.ctv") == 1
    assert "unknown phantom" in capsys.readouterr().err


def test_wfbp_requires_a_gain_source(ws, capsys):
    # desk32 has no preset gain, so the flag (or params/config) is mandatory
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--out", ws["dir"] / "x.ctv") == 1
    assert "gain" in capsys.readouterr().err


def test_wfbp_eval_and_slice(ws, capsys):
    out = ws["dir"] / "recon.ctv"
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--gain", GAIN32, "--out", out) == 0
    capsys.readouterr()
    assert run("eval", "--volume", out, "--reference", ws["gt"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("rmse_hu=") and " psnr_db=" in line
    rmse = float(line.split()[0].split("=")[1])
    assert 0.0 < rmse < 2000.0

    # identical volumes: zero error, infinite psnr
    assert run("eval", "--volume", out, "--reference", out) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == \
        "rmse_hu=0 psnr_db=inf"

    pgm = ws["dir"] / "mid.pgm"
    assert run("slice", "--volume", out, "--axis", "axial", "--index", "16",
               "--out", pgm) == 0
    header = pgm.read_bytes()[:2]
    assert header == b"P5"
    assert run("slice", "--volume", out, "--axis", "axial", "--index", "99",
               "--out", ws["dir"] / "bad.pgm") == 1


def test_wfbp_gain_scales_output(ws):
    a_path = ws["dir"] / "g10.ctv"
    b_path = ws["dir"] / "g20.ctv"
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--gain", "10", "--out", a_path) == 0
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--gain", "20", "--out", b_path) == 0
    a = mio.read_volume(a_path).data
    b = mio.read_volume(b_path).data
    np.testing.assert_allclose(b, 2.0 * a, atol=1e-12)


def test_wfbp_reads_trained_params(ws):
    taps = ramp_taps(64, 3.0)
    p_path = ws["dir"] / "hand.ctp"
    mio.write_params(p_path, taps, 10.0)
    out = ws["dir"] / "fromparams.ctv"
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--params", p_path, "--out", out) == 0
    ref = ws["dir"] / "g10.ctv"
    if not ref.exists():
        assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec",
                   "desk32", "--gain", "10", "--out", ref) == 0
    np.testing.assert_array_equal(mio.read_volume(out).data,
                                  mio.read_volume(ref).data)


def test_config_file_sets_defaults_but_flags_win(ws, capsys):
    cfg = ws["dir"] / "wcfg.json"
    cfg.write_text('{"gain": 10.0}')
    a_path = ws["dir"] / "cfg10.ctv"
    b_path = ws["dir"] / "cfg18.ctv"
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--config", cfg, "--out", a_path) == 0
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--config", cfg, "--gain", GAIN32, "--out", b_path) == 0
    a = mio.read_volume(a_path).data
    b = mio.read_volume(b_path).data
    # stored as float32, so the rescale only matches to f32 precision
    np.testing.assert_allclose(b, a * float(GAIN32) / 10.0,
                               rtol=1e-6, atol=1e-9)

    bad = ws["dir"] / "bad.json"
    bad.write_text('{"nonsense_key": 1}')
    assert run("wfbp", "--sinogram", ws["clean"], "--config", bad,
               "--out", ws["dir"] / "x.ctv") == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_irtv_writes_volume_and_descending_trace(ws):
    cfg = ws["dir"] / "ircfg.json"
    cfg.write_text('{"gain": %s}' % GAIN32)
    out = ws["dir"] / "ir.ctv"
    trace = ws["dir"] / "trace.csv"
    assert run("irtv", "--sinogram", ws["noisy"], "--volume-spec", "desk32",
               "--recon-config", cfg, "--lr", "1e-3", "--tv-strength", "1.0",
               "--n-updates", "20", "--trace-out", trace, "--out", out) == 0
    assert out.exists()
    lines = trace.read_text().strip().splitlines()
    assert lines[0] == "update,data_term,tv_term,total"
    first = [float(x) for x in lines[1].split(",")]
    last = [float(x) for x in lines[-1].split(",")]
    assert first[0] == 0 and last[0] == 20
    assert last[3] < first[3]  # endpoint objective improves


def test_irtv_divergence_exits_two(ws, capsys):
    cfg = ws["dir"] / "ircfg2.json"
    cfg.write_text('{"gain": %s}' % GAIN32)
    assert run("irtv", "--sinogram", ws["noisy"], "--volume-spec", "desk32",
               "--recon-config", cfg, "--lr", "50", "--n-updates", "30",
               "--out", ws["dir"] / "div.ctv") == 2
    assert "numerical failure" in capsys.readouterr().err


def test_calibrate_writes_params_and_curve(ws):
    p_out = ws["dir"] / "trained.ctp"
    curve = ws["dir"] / "curve.csv"
    assert run("calibrate", "--scans", ws["clean"], "--volume-spec", "desk32",
               "--steps", "3", "--targets-per-step", "6", "--slab-voxels", "2",
               "--dose-in", "1.0", "--dose-target", "1.0", "--noise-free",
               "--i0", "100000", "--init-gain", GAIN32, "--perturb-taps",
               "0.15", "--supersample-targets", "1", "--seed", "1",
               "--out-params", p_out, "--curve", curve) == 0
    taps, gain = mio.read_params(p_out)
    assert taps.shape == (128,) and np.isfinite(taps).all()
    assert gain > 0
    rows = curve.read_text().strip().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) == 4
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(l > 1e-8 for l in losses)  # thin slabs still see the object


def test_calibrate_zero_steps_returns_the_init(ws):
    p_out = ws["dir"] / "init.ctp"
    assert run("calibrate", "--scans", ws["clean"], "--volume-spec", "desk32",
               "--steps", "0", "--init-gain", GAIN32,
               "--out-params", p_out) == 0
    taps, gain = mio.read_params(p_out)
    np.testing.assert_array_equal(taps, ramp_taps(64, 3.0))
    assert gain == pytest.approx(float(GAIN32))


def test_replay_reproduces_bit_identical_outputs(ws):
    out = ws["dir"] / "rep.ctv"
    assert run("wfbp", "--sinogram", ws["clean"], "--volume-spec", "desk32",
               "--gain", GAIN32, "--out", out) == 0
    first = out.read_bytes()
    assert run("replay", str(out) + ".manifest.json") == 0
    assert out.read_bytes() == first

    p_out = ws["dir"] / "rep.ctp"
    assert run("calibrate", "--scans", ws["clean"], "--volume-spec", "desk32",
               "--steps", "2", "--targets-per-step", "6", "--slab-voxels", "2",
               "--dose-in", "1.0", "--dose-target", "1.0", "--noise-free",
               "--i0", "100000", "--init-gain", GAIN32,
               "--supersample-targets", "1", "--seed", "4",
               "--out-params", p_out) == 0
    blob = p_out.read_bytes()
    assert run("replay", str(p_out) + ".manifest.json") == 0
    assert p_out.read_bytes() == blob

    sim = ws["dir"] / "rep.cts"
    assert run("simulate", "--phantom-file", ws["phantom"], "--geometry",
               "desk32", "--dose", "0.5", "--i0", "10000", "--seed", "9",
               "--supersample-uv", "1", "--out", sim) == 0
    sblob = sim.read_bytes()
    assert run("replay", str(sim) + ".manifest.json") == 0
    assert sim.read_bytes() == sblob


def test_io_failures_exit_three(ws, capsys):
    assert run("eval", "--volume", ws["dir"] / "missing.ctv",
               "--reference", ws["gt"]) == 3
    corrupt = ws["dir"] / "corrupt.cts"
    corrupt.write_bytes(ws["clean"].read_bytes()[:100])
    assert run("wfbp", "--sinogram", corrupt, "--volume-spec", "desk32",
               "--gain", "1", "--out", ws["dir"] / "x.ctv") == 3
    assert "format error" in capsys.readouterr().err
    assert run("replay", ws["dir"] / "no-such.manifest.json") == 3


def test_intensity_sinogram_is_a_usage_error(ws, capsys):
    """Reconstruction commands insist on log-attenuation input."""
    from helixct import operators as ops
    from helixct.presets import get_preset
    geo, _ = get_preset("desk32")
    shape = (geo.n_projections, geo.detector_rows, geo.detector_cols)
    sino = ops.Sinogram(np.full(shape, 50.0), ops.Space.PHOTON_INTENSITY, geo,
                        i0_photons=100.0)
    path = ws["dir"] / "intensity.cts"
    mio.write_sinogram(path, sino)
    assert run("wfbp", "--sinogram", path, "--volume-spec", "desk32",
               "--gain", "1", "--out", ws["dir"] / "x.ctv") == 1
    assert "log-attenuation" in capsys.readouterr().err
