import json
import math

import numpy as np
import pytest

from pointmots import embed_net
from pointmots.cli import main
from pointmots.mask_geometry import InstanceObservation, read_mask_lines, rle_decode
from pointmots.pointcloud import SamplerConfig, sample_points
from pointmots.synth_world import load_sequence

SMALL_PTS = ["--n-fg", "64", "--n-env", "32"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data"), "--sequences", "2", "--frames", "12",
                 "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "model"), "--epochs", "2",
                 "--batches-per-epoch", "2", "--ids-per-batch", "4", *SMALL_PTS]) == 0
    return root


def files_of(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_is_deterministic(workdir, tmp_path):
    assert main(["gen", "--out", str(tmp_path / "again"), "--sequences", "2", "--frames", "12",
                 "--seed", "3"]) == 0
    assert files_of(tmp_path / "again") == files_of(workdir / "data")


def test_train_deterministic_across_threads(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "m3"),
                 "--epochs", "2", "--batches-per-epoch", "2", "--ids-per-batch", "4",
                 "--threads", "3", *SMALL_PTS]) == 0
    assert files_of(tmp_path / "m3") == files_of(workdir / "model")


def test_track_and_eval_deterministic_across_threads(workdir, tmp_path, capsys):
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"hyp{threads}"
        assert main(["track", "--data", str(workdir / "data"), "--params",
                     str(workdir / "model" / "params.bin"), "--out", str(out),
                     "--threads", threads, *SMALL_PTS]) == 0
        rep = tmp_path / f"report{threads}.csv"
        assert main(["eval", "--gt", str(workdir / "data"), "--hyp", str(out), "--report", str(rep),
                     "--threads", threads]) == 0
        outs.append((files_of(out), rep.read_bytes()))
    assert outs[0] == outs[1]
    assert "median embedding extraction latency" in capsys.readouterr().out


def test_track_single_file_with_masks(workdir, tmp_path):
    seq = workdir / "data" / "seq0000"
    out = tmp_path / "r.txt"
    assert main(["track", "--data", str(seq), "--params", str(workdir / "model" / "params.bin"),
                 "--masks", str(seq / "instances.txt"), "--out", str(out), *SMALL_PTS]) == 0
    hyp = read_mask_lines(out)
    gt = read_mask_lines(seq / "instances.txt")
    assert [(o.frame_index, o.mask) for o in hyp] == [(o.frame_index, o.mask) for o in gt]


def test_self_evaluation_prints_one(workdir, tmp_path, capsys):
    f = workdir / "data" / "seq0001" / "instances.txt"
    assert main(["eval", "--gt", str(f), "--hyp", str(f), "--report", str(tmp_path / "r.csv")]) == 0
    assert "sMOTSA 1.0000 MOTSA 1.0000 IDS 0" in capsys.readouterr().out
    row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
    assert row[1:4] == ["1.0", "1.0", "0"]


def test_missing_inputs_exit_2(workdir, tmp_path, capsys):
    assert main(["eval", "--gt", str(tmp_path / "nope.txt"), "--hyp", str(tmp_path / "x.txt")]) == 2
    assert main(["track", "--data", str(workdir / "data"), "--params", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["gen", "--out", str(tmp_path / "g"), "--config", str(tmp_path / "c.json")]) == 2
    assert "error:" in capsys.readouterr().err


def test_corrupt_params_exit_2(workdir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes((workdir / "model" / "params.bin").read_bytes()[:100])
    assert main(["track", "--data", str(workdir / "data"), "--params", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_invalid_values_exit_1(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tracker": {"beta": 0}}))
    assert main(["track", "--data", str(workdir / "data"), "--params",
                 str(workdir / "model" / "params.bin"), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"sampler": {"bogus": 1}}))
    assert main(["viz", "--data", str(workdir / "data" / "seq0000"), "--params",
                 str(workdir / "model" / "params.bin"), "--out", str(tmp_path / "v"),
                 "--config", str(cfg)]) == 1
    assert main(["validate", "--data", str(workdir / "data"), "--threads", "0"]) == 1


def test_flags_override_config(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"world": {"frames": 7, "min_objects": 2, "max_objects": 2}}))
    assert main(["gen", "--out", str(tmp_path / "g"), "--config", str(cfg), "--frames", "5"]) == 0
    meta = json.loads((tmp_path / "g" / "seq0000" / "meta.json").read_text())
    assert meta["frames"] == 5 and meta["config"]["max_objects"] == 2


def test_validate_reports_corruption(workdir, tmp_path):
    import shutil
    shutil.copytree(workdir / "data", tmp_path / "d")
    assert main(["validate", "--data", str(tmp_path / "d")]) == 0
    (tmp_path / "d" / "seq0000" / "class_000002.raw").write_bytes(b"\0" * 10)
    assert main(["validate", "--data", str(tmp_path / "d")]) == 1


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    res = json.loads((tmp_path / "g.json").read_text())
    assert res["max_relative_error"] < 1e-4 and res["parameters_checked"] == 2145


def test_viz_geometry(workdir, tmp_path):
    seq_dir = workdir / "data" / "seq0000"
    out = tmp_path / "viz"
    assert main(["viz", "--data", str(seq_dir), "--params", str(workdir / "model" / "params.bin"),
                 "--out", str(out), "--frames", "3", *SMALL_PTS]) == 0
    seq = load_sequence(seq_dir)
    for t in range(3):
        gt = [o for o in seq.instances if o.frame_index == t]
        dump = json.loads((out / f"points_{t:06d}.json").read_text())
        assert len(dump) == len(gt)
        for o, d in zip(gt, dump):
            seg = rle_decode(o.mask).astype(bool)
            x0, y0, x1, y1 = d["crop_box"]
            assert len(d["top_weighted_points"]) == math.ceil(0.1 * 64)
            assert all(seg[v, u] for u, v in d["top_weighted_points"])
            assert 1 <= len(d["critical_env_points"]) <= 5
            for u, v in d["critical_env_points"]:
                assert x0 <= u < x1 and y0 <= v < y1 and not seg[v, u]
        assert (out / f"overlay_{t:06d}.ppm").read_bytes().startswith(b"P6\n")


def test_viz_uniform_weights_pick_first_points(workdir, tmp_path):
    params = embed_net.init_params(0, 3)  # zero final head layer -> uniform weights
    embed_net.save_params(params, tmp_path / "p.bin")
    seq_dir = workdir / "data" / "seq0000"
    assert main(["viz", "--data", str(seq_dir), "--params", str(tmp_path / "p.bin"),
                 "--out", str(tmp_path / "v"), "--frames", "1", "--seed", "5", *SMALL_PTS]) == 0
    seq = load_sequence(seq_dir)
    o = [x for x in seq.instances if x.frame_index == 0][0]
    pc = sample_points(seq.image(0), seq.class_map(0), InstanceObservation(0, o.class_id, o.mask),
                       SamplerConfig(n_fg=64, n_env=32, rng_seed=5), np.random.default_rng([5, 0, 0]))
    dump = json.loads((tmp_path / "v" / "points_000000.json").read_text())
    assert dump[0]["top_weighted_points"] == pc.fg_uv[:7].astype(int).tolist()
