import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from qsmtk.cli import build_parser, main
from qsmtk.dipole import ForwardOperator, ReconState
from qsmtk.inversion import SolveConfig, pgd_solve, tkd_invert
from qsmtk.metrics import nrmse
from qsmtk.phantom import orientation_set
from qsmtk.qvol import Volume, read_qvol, write_qvol
from qsmtk.sti import extract_labels
from qsmtk.volume import Grid3


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def last_json(out):
    return json.loads(out[out.index("{"):])


@pytest.fixture
def tensor16(tmp_path, capsys):
    code, _ = run(capsys, "--seed", 4, "phantom", "--kind", "tensor", "--dims", 16,
                  "--anisotropy", 0.5, "--out-dir", tmp_path)
    assert code == 0
    return tmp_path / "chi_tensor.qvol"


def test_phantom_sphere_outputs(tmp_path, capsys):
    code, out = run(capsys, "phantom", "--kind", "sphere", "--dims", 32, "--radius", 6,
                    "--dchi", 1.0, "--out-dir", tmp_path)
    assert code == 0
    line = json.loads(out)
    assert set(line["files"]) == {"chi", "field_analytic"}
    assert read_qvol(tmp_path / "chi.qvol").data.max() == 1.0


def test_phantom_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "phantom", "--kind", "tensor", "--seed", 7, "--dims", 12,
                   "--out-dir", tmp_path / d)[0] == 0
    assert (tmp_path / "a/chi_tensor.raw").read_bytes() == (tmp_path / "b/chi_tensor.raw").read_bytes()
    assert json.loads((tmp_path / "a/chi_tensor.qvol").read_text())["channels"] == 6


def test_missing_dims_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--kind", "sphere"])
    assert exc.value.code == 2


def test_invalid_geometry_exit_2(tmp_path, capsys):
    code, _ = run(capsys, "phantom", "--dims", 16, "--radius", 12, "--out-dir", tmp_path)
    assert code == 2


def test_forward_tensor_equals_two_channel_path(tmp_path, capsys, tensor16):
    assert run(capsys, "forward", "--tensor", tensor16, "--out", tmp_path / "f.qvol")[0] == 0
    chi = read_qvol(tensor16)
    labels = extract_labels(chi.data)
    write_qvol(Volume(labels.chi33, chi.grid), tmp_path / "c33.qvol")
    write_qvol(Volume(labels.dbp, chi.grid), tmp_path / "dbp.qvol")
    assert run(capsys, "forward", "--chi33", tmp_path / "c33.qvol", "--dbp", tmp_path / "dbp.qvol",
               "--out", tmp_path / "g.qvol")[0] == 0
    f, g = read_qvol(tmp_path / "f.qvol").data, read_qvol(tmp_path / "g.qvol").data
    # both files are float32; compare at that precision
    assert np.abs(f - g).max() <= 1e-7 * np.abs(f).max()


def test_forward_zero_input(tmp_path, capsys):
    write_qvol(Volume(np.zeros((8, 8, 8)), Grid3((8, 8, 8))), tmp_path / "z.qvol")
    assert run(capsys, "forward", "--chi33", tmp_path / "z.qvol", "--out", tmp_path / "f.qvol")[0] == 0
    assert not read_qvol(tmp_path / "f.qvol").data.any()


def test_forward_channel_mismatch(tmp_path, capsys, tensor16):
    assert run(capsys, "forward", "--chi33", tensor16, "--out", tmp_path / "f.qvol")[0] == 2


def _field(tmp_path, capsys, tensor16):
    run(capsys, "forward", "--tensor", tensor16, "--out", tmp_path / "field.qvol")
    return tmp_path / "field.qvol"


def test_invert_tkd_matches_library(tmp_path, capsys, tensor16):
    field = _field(tmp_path, capsys, tensor16)
    code, out = run(capsys, "invert", "--field", field, "--method", "tkd", "--out-dir", tmp_path / "r")
    assert code == 0
    rep = last_json(out)
    assert rep["threshold"] == 0.2 and "dbp" not in rep["files"]
    expect = tkd_invert(read_qvol(field).data)
    got = read_qvol(tmp_path / "r/chi33.qvol").data
    assert np.abs(got - expect).max() <= 1e-6 * np.abs(expect).max()
    assert json.loads((tmp_path / "r/report.json").read_text())["method"] == "tkd"


def test_invert_pgd_three_steps(tmp_path, capsys, tensor16, caplog):
    field = _field(tmp_path, capsys, tensor16)
    with caplog.at_level(logging.INFO, logger="qsmtk"):
        code, out = run(capsys, "--verbose", "invert", "--field", field, "--method", "pgd",
                        "--out-dir", tmp_path / "r")
    assert code == 0
    rep = last_json(out)
    assert abs(rep["lipschitz"] - 13 / 9) < 1e-3
    assert any("Lipschitz" in r.message for r in caplog.records)
    assert rep["iterations_run"] == 3 and len(rep["residuals"]) == 4
    b = read_qvol(field).data
    lib = pgd_solve(b, cfg=SolveConfig(steps=rep["steps"][0]))
    got = read_qvol(tmp_path / "r/chi33.qvol").data
    assert np.abs(got - lib.state.chi33).max() <= 1e-6 * np.abs(lib.state.chi33).max()
    assert (tmp_path / "r/dbp.qvol").exists()


def test_invert_cg_and_soft_prox(tmp_path, capsys, tensor16):
    field = _field(tmp_path, capsys, tensor16)
    code, out = run(capsys, "invert", "--field", field, "--method", "cg", "--lam", "1e-6",
                    "--out-dir", tmp_path / "cg")
    assert code == 0 and last_json(out)["converged"]
    code, out = run(capsys, "invert", "--field", field, "--method", "pgd", "--step", "0.5",
                    "--prox", "soft:0.001:chi33", "--out-dir", tmp_path / "soft")
    assert code == 0 and last_json(out)["prox"]["lam"] == 0.001


def test_invert_patchwise(tmp_path, capsys):
    n = 20
    rng = np.random.default_rng(0)
    b = ForwardOperator(Grid3((n, n, n))).apply(ReconState(rng.standard_normal((n,) * 3),
                                                           np.zeros((n,) * 3)))
    write_qvol(Volume(b, Grid3((n, n, n))), tmp_path / "b.qvol")
    code, out = run(capsys, "invert", "--field", tmp_path / "b.qvol", "--method", "pgd",
                    "--step", "0.6", "--patch", 12, "--overlap", "1/3", "--out-dir", tmp_path)
    assert code == 0
    rep = last_json(out)
    assert rep["patch"]["stride"] == 8 and rep["patch"]["count"] == 8
    assert read_qvol(tmp_path / "dbp.qvol").data.shape == (n, n, n)


def test_invert_divergence_exit_3(tmp_path, capsys, tensor16):
    field = _field(tmp_path, capsys, tensor16)
    code, _ = run(capsys, "invert", "--field", field, "--method", "pgd", "--step", 5,
                  "--iters", 20, "--out-dir", tmp_path)
    assert code == 3


def test_invert_bad_flags(tmp_path, capsys, tensor16):
    field = _field(tmp_path, capsys, tensor16)
    assert run(capsys, "invert", "--field", field, "--prox", "hard:1", "--method", "pgd",
               "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "invert", "--field", field, "--threshold", 0.9, "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "invert", "--field", tmp_path / "nope.qvol", "--out-dir", tmp_path)[0] == 4


def _manifest(tmp_path, capsys, tensor, n):
    for i, R in enumerate(orientation_set(n, 45.0, seed=3)):
        code, _ = run(capsys, "forward", "--tensor", tensor, "--R=" + ",".join(str(float(v)) for v in R.ravel()),
                      "--out", tmp_path / f"o{i}.qvol", "--manifest", tmp_path / "m.json")
        assert code == 0
    return tmp_path / "m.json"


def test_sti_round_trip_via_manifest(tmp_path, capsys, tensor16):
    manifest = _manifest(tmp_path, capsys, tensor16, 12)
    code, out = run(capsys, "sti", "--manifest", manifest, "--out-dir", tmp_path / "fit")
    assert code == 0 and last_json(out)["orientations"] == 12
    truth = read_qvol(tensor16).data
    est = read_qvol(tmp_path / "fit/chi_tensor.qvol").data
    # float32 storage of the fields bounds the round-trip accuracy
    for c in range(6):
        assert nrmse(est[c], truth[c]) < 1e-3
    assert (tmp_path / "fit/dbp.qvol").exists()


def test_sti_too_few_and_cosmos(tmp_path, capsys, tensor16):
    manifest = _manifest(tmp_path, capsys, tensor16, 5)
    assert run(capsys, "sti", "--manifest", manifest, "--out-dir", tmp_path)[0] == 2
    code, out = run(capsys, "sti", "--manifest", manifest, "--cosmos", "--out-dir", tmp_path)
    assert code == 0 and "chi_cosmos" in last_json(out)["files"]


def test_metrics_identical_roi_and_consistency(tmp_path, capsys, tensor16):
    chi = read_qvol(tensor16)
    labels = extract_labels(chi.data)
    g = chi.grid
    write_qvol(Volume(labels.chi33, g), tmp_path / "c33.qvol")
    write_qvol(Volume(labels.dbp, g), tmp_path / "dbp.qvol")
    lab = np.zeros(g.dims)
    lab[:8] = 1
    lab[8:] = 2
    write_qvol(Volume(lab, g, "dimensionless"), tmp_path / "lab.qvol")
    (tmp_path / "names.json").write_text(json.dumps({"1": "left", "2": "right"}))
    code, out = run(capsys, "metrics", "--x", tmp_path / "c33.qvol", "--ref", tmp_path / "c33.qvol",
                    "--roi", tmp_path / "lab.qvol", "--roi-names", tmp_path / "names.json",
                    "--out", tmp_path / "m.json")
    rep = last_json(out)
    assert code == 0 and rep["rmse"] == 0 and rep["ssim"] == 1 and rep["hfen"] == 0
    assert [r["label"] for r in rep["rois"]] == ["left", "right"]
    assert json.loads((tmp_path / "m.json").read_text()) == rep

    run(capsys, "forward", "--tensor", tensor16, "--out", tmp_path / "f.qvol")
    _, two = run(capsys, "metrics", "--consistency", "--field", tmp_path / "f.qvol",
                 "--state-chi33", tmp_path / "c33.qvol", "--state-dbp", tmp_path / "dbp.qvol")
    _, one = run(capsys, "metrics", "--consistency", "--field", tmp_path / "f.qvol",
                 "--state-chi33", tmp_path / "c33.qvol")
    assert last_json(two)["consistency"]["l1"] < last_json(one)["consistency"]["l1"]
    assert run(capsys, "metrics", "--consistency", "--field", tmp_path / "f.qvol")[0] == 2
    assert run(capsys, "metrics")[0] == 2


def test_metrics_shape_mismatch(tmp_path, capsys):
    write_qvol(Volume(np.ones((4, 4, 4)), Grid3((4, 4, 4))), tmp_path / "a.qvol")
    write_qvol(Volume(np.ones((4, 4, 5)), Grid3((4, 4, 5))), tmp_path / "b.qvol")
    assert run(capsys, "metrics", "--x", tmp_path / "a.qvol", "--ref", tmp_path / "b.qvol")[0] == 2


def test_slice_and_io_errors(tmp_path, capsys, tensor16):
    code, _ = run(capsys, "slice", "--in", tensor16, "--index", 8, "--window=-0.1,0.1",
                  "--out", tmp_path / "s.pgm")
    assert code == 0 and (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
    assert run(capsys, "slice", "--in", tensor16, "--index", 99, "--window", "0,1",
               "--out", tmp_path / "s.pgm")[0] == 2
    (tmp_path / "chi_tensor.raw").write_bytes(b"\0" * 12)
    assert run(capsys, "slice", "--in", tensor16, "--index", 1, "--window", "0,1",
               "--out", tmp_path / "s.pgm")[0] == 4


def test_help_documents_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    text = " ".join(sub["invert"].format_help().split())
    for needle in ["default: 0.2", "default: 3", "typical 48", "default: 1/3"]:
        assert needle in text
    for name, sp in sub.items():
        assert "--help" in sp.format_help()


def test_demo_small(tmp_path, capsys):
    code, out = run(capsys, "demo", "--dims", 32, "--out-dir", tmp_path)
    rep = last_json(out)
    assert code == 0 and rep["all_checks_pass"]
    assert (tmp_path / "report.json").exists() and (tmp_path / "chi33_tkd_axial.pgm").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qsmtk", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "demo" in res.stdout
