import json

import numpy as np
import pytest

from msfusion.cli import main
from msfusion.io import read_tensor, write_tensor
from msfusion.metrics import ari, mbo, miou

SCENE = {
    "canvas": [32, 32],
    "n_types": 3,
    "channels": 8,
    "objects": [
        {"type_id": 1, "center": [8, 8], "radius": 4, "shape": "square"},
        {"type_id": 2, "center": [20, 20], "radius": 8, "shape": "square"},
    ],
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def dump(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def scene_dir(tmp_path, capsys):
    scene = dump(tmp_path / "scene.json", SCENE)
    code, out, _ = run(capsys, "synth", scene, "--seed", 4, "--out-dir", tmp_path / "s")
    assert code == 0
    return tmp_path / "s"


def fit_all(capsys, d, m=4):
    assert run(capsys, "project", "--c", 8, "--seed", 1, "--out", d / "proj.msf")[0] == 0
    assert run(capsys, "fit", "--features", d, "--m", m, "--role", "si", "--out", d / "si.msf",
               "--projection", d / "proj.msf", "--epochs", 5)[0] == 0
    for k in (1, 2, 3):
        assert run(capsys, "fit", "--features", d, "--m", m, "--role", "sv", "--scale", k,
                   "--out", d / f"sv{k}.msf", "--projection", d / "proj.msf", "--epochs", 5)[0] == 0


def run_config(d, **kw):
    return {"features_dir": str(d), "codebook_si": str(d / "si.msf"),
            "codebooks_sv": [str(d / f"sv{k}.msf") for k in (1, 2, 3)],
            "projection": str(d / "proj.msf"), "output_dir": str(d / "out"), **kw}


def test_synth_manifest(scene_dir, capsys):
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["n_scales"] == 3
    assert manifest["files"]["features"] == ["features_s1.msf", "features_s2.msf", "features_s3.msf"]
    feats, meta = read_tensor(scene_dir / "features_s2.msf")
    assert feats.shape == (16, 16, 8) and meta["scale"] == 2


def test_synth_divisibility_and_schema_errors(tmp_path, capsys):
    bad = dump(tmp_path / "bad.json", {**SCENE, "canvas": [30, 30]})
    code, _, err = run(capsys, "synth", bad, "--out-dir", tmp_path / "o")
    assert code == 2 and "divisible" in err
    extra = dump(tmp_path / "extra.json", {**SCENE, "colour": "red"})
    assert run(capsys, "synth", extra, "--out-dir", tmp_path / "o")[0] == 2


def test_fit_roles(scene_dir, capsys):
    code, out, _ = run(capsys, "fit", "--features", scene_dir, "--m", 4, "--role", "si",
                       "--out", scene_dir / "si.msf", "--epochs", 2)
    info = json.loads(out)
    assert code == 0 and info["id"] == "shared-si"
    assert info["n_samples"] == 32 * 32 + 16 * 16 + 8 * 8
    code, out, _ = run(capsys, "fit", "--features", scene_dir, "--m", 4, "--role", "sv", "--scale", 2,
                       "--out", scene_dir / "sv.msf", "--epochs", 2)
    info = json.loads(out)
    assert info["id"] == "sv-scale-2" and info["n_samples"] == 16 * 16
    assert read_tensor(scene_dir / "sv.msf")[0].shape == (4, 8)


def test_fit_errors(scene_dir, tmp_path, capsys):
    assert run(capsys, "fit", "--features", scene_dir, "--m", 10 ** 6, "--role", "si",
               "--out", scene_dir / "x.msf")[0] == 2
    assert run(capsys, "fit", "--features", tmp_path / "missing", "--m", 2, "--role", "si",
               "--out", tmp_path / "x.msf")[0] == 4


def test_fuse_outputs(scene_dir, tmp_path, capsys):
    fit_all(capsys, scene_dir)
    cfg = dump(tmp_path / "run.json", run_config(scene_dir))
    assert run(capsys, "fuse", cfg)[0] == 0
    out = scene_dir / "out"
    assert sorted(p.name for p in out.glob("guidance_*")) == ["guidance_s1.msf"]
    report = json.loads((out / "report.json").read_text())
    assert report["config_echo"]["output_dir"] == str(out)
    assert "msf_forward_ms" in json.loads((out / "timings.json").read_text())
    ws, _ = read_tensor(out / "winning_scale_s1.msf")
    assert set(np.unique(ws)) <= {1, 2, 3}


def test_fuse_off_off_is_naive(scene_dir, tmp_path, capsys):
    from msfusion.fusion import ProjectionPair, intra_scale_fuse, project_up
    from msfusion.quantizer import Codebook, quantize

    fit_all(capsys, scene_dir)
    cfg = dump(tmp_path / "run.json", run_config(scene_dir, inter_fusion=False, intra_fusion=False))
    assert run(capsys, "fuse", cfg)[0] == 0
    g, _ = read_tensor(scene_dir / "out" / "guidance_s1.msf")
    proj = ProjectionPair.from_down(read_tensor(scene_dir / "proj.msf")[0].astype(float))
    cb = Codebook(read_tensor(scene_dir / "si.msf")[0].astype(float))
    z = read_tensor(scene_dir / "features_s1.msf")[0].astype(float)
    q = quantize(project_up(z, proj).si, cb).discrete
    expect = intra_scale_fuse(q, np.zeros_like(q), proj).astype(np.float32)
    assert np.array_equal(g, expect)


def test_fuse_errors(scene_dir, tmp_path, capsys):
    fit_all(capsys, scene_dir)
    bad = dump(tmp_path / "bad.json", {**run_config(scene_dir), "mystery": 1})
    assert run(capsys, "fuse", bad)[0] == 2
    two = dump(tmp_path / "two.json", {**run_config(scene_dir), "codebooks_sv": [str(scene_dir / "sv1.msf")]})
    assert run(capsys, "fuse", two)[0] == 2
    write_tensor(scene_dir / "wrong.msf", np.zeros((4, 5), np.float32))
    wrong = dump(tmp_path / "wrong.json", {**run_config(scene_dir), "codebook_si": str(scene_dir / "wrong.msf")})
    assert run(capsys, "fuse", wrong)[0] == 3


def test_eval_report(tmp_path, capsys):
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, (8, 8)).astype(np.uint32)
    pred = rng.integers(0, 4, (8, 8)).astype(np.uint32)
    write_tensor(tmp_path / "gt.msf", gt)
    write_tensor(tmp_path / "pred.msf", pred)
    write_tensor(tmp_path / "f.msf", rng.standard_normal((8, 8, 2)).astype(np.float32))
    code, _, _ = run(capsys, "eval", "--pred", tmp_path / "pred.msf", "--gt", tmp_path / "gt.msf",
                     "--features", tmp_path / "f.msf", "--out", tmp_path / "r.json")
    rep = json.loads((tmp_path / "r.json").read_text())
    assert code == 0
    assert set(rep) == {"ari", "ari_fg", "miou", "mbo", "inter_cluster", "intra_cluster",
                        "n_clusters", "config_echo"}
    assert rep["ari"] == pytest.approx(ari(pred, gt))
    assert rep["miou"] == pytest.approx(miou(pred, gt))
    assert rep["mbo"] == pytest.approx(mbo(pred, gt))
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "gt.msf", "--gt", tmp_path / "gt.msf")
    rep = json.loads(out)
    assert all(rep[k] == 1.0 for k in ("ari", "ari_fg", "miou", "mbo"))


def test_eval_shape_mismatch(tmp_path, capsys):
    write_tensor(tmp_path / "a.msf", np.zeros((4, 4), np.uint32))
    write_tensor(tmp_path / "b.msf", np.zeros((2, 2), np.uint32))
    assert run(capsys, "eval", "--pred", tmp_path / "a.msf", "--gt", tmp_path / "b.msf")[0] == 3


def test_params(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert json.loads(out) == {"baseline": 1048576, "msf": 196608, "reduction_pct": 81.25, "cost_ratio": 1.3125}
    assert json.loads(run(capsys, "params", "--n", 1)[1])["cost_ratio"] == 1.0
    assert json.loads(run(capsys, "params", "--n", 2)[1])["cost_ratio"] == 1.25


def test_ablate(tmp_path, capsys):
    doc = {"master_seed": 1, "output_dir": str(tmp_path / "ab"), "grid": {"n_scales": [2, 3]},
           "benchmark": {"canvas": [32, 32], "n_objects": 2, "radii": [4, 8], "channels": 8,
                         "m_group": 4, "epochs": 3}}
    cfg = dump(tmp_path / "ab.json", doc)
    assert run(capsys, "ablate", cfg)[0] == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert lines[0].split(",") == ["run_id", "inter", "intra", "sv_mode", "n_scales", "guidance", "seed",
                                   "ari", "ari_fg", "miou", "mbo", "inter_cluster", "intra_cluster", "wall_ms"]
    assert len(lines) == 3
    summary = json.loads((tmp_path / "ab" / "summary.json").read_text())
    assert summary["n_rows"] == 2
    empty = dump(tmp_path / "e.json", {"grid": {}})
    assert run(capsys, "ablate", empty)[0] == 2


def test_threads_env_default(monkeypatch):
    from msfusion.cli import build_parser
    monkeypatch.setenv("MSF_THREADS", "6")
    assert build_parser().parse_args(["params"]).threads == 6
