import json
import os

import numpy as np
import pytest
from PIL import Image

from movnect import cli
from movnect import distill as D
from movnect import network as N
from movnect.skeleton import Skeleton, forward_kinematics

SIZE = 64


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    net = N.build(N.profile("a", input_size=SIZE), seed=3)
    N.save_weights(net, root / "a.mvnw")
    ts, frames, poses, uv, t, f = D.synth_sequence(6, seed=2, size=128)
    seq = root / "seq"
    seq.mkdir()
    for k, img in enumerate(frames):
        Image.fromarray(img).save(seq / f"frame_{k:04d}.png")
    return {"root": root, "weights": root / "a.mvnw", "seq": seq, "poses": poses, "focal": f}


def infer(ws, src, out, *extra):
    return cli.main(["infer", "--weights", str(ws["weights"]), "--input", str(src), "--focal", str(ws["focal"]),
                     "--out", str(out), "--input-size", str(SIZE), *extra])


def test_infer_single_image_gives_one_record(workspace, tmp_path):
    out = tmp_path / "one.jsonl"
    assert infer(workspace, workspace["seq"] / "frame_0000.png", out) == 0
    records = cli.read_jsonl(out)
    assert len(records) == 1
    r = records[0]
    assert list(r) == list(cli.RECORD_FIELDS)
    assert len(r["kp2d"]) == 15 and len(r["pose3d"]) == 15 and len(r["rot"]) == 15 and len(r["crop"]) == 6
    np.testing.assert_allclose(np.linalg.norm(r["rot"], axis=1), 1.0, atol=1e-6)


def test_infer_sequence_is_deterministic_and_scored(workspace, tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert infer(workspace, workspace["seq"], a) == 0
    report = capsys.readouterr().out
    assert "forward" in report and "end-to-end" in report
    assert infer(workspace, workspace["seq"], b) == 0
    assert a.read_bytes() == b.read_bytes()
    records = cli.read_jsonl(a)
    assert [r["frame"] for r in records] == list(range(6))
    assert [r["t"] for r in records] == pytest.approx(np.arange(6) / 30.0)
    # smoke oracle: untrained weights, so only finiteness is asserted
    skel = Skeleton()
    err = [D.mpjpe(forward_kinematics(skel, np.array(r["rot"])), p) for r, p in zip(records, workspace["poses"])]
    assert np.all(np.isfinite(err))


def test_infer_stage_timings_cover_end_to_end(workspace):
    net = cli.load_network(str(workspace["weights"]), SIZE)
    frames = [np.asarray(Image.open(workspace["seq"] / f"frame_{k:04d}.png")) for k in range(6)]
    _, timings, totals = cli.infer_frames(net, frames, np.arange(6) / 30.0, workspace["focal"])
    stage_sum = sum(sum(m.values()) for m in timings)
    assert abs(stage_sum - sum(totals)) <= 0.1 * sum(totals)


def test_infer_input_errors(workspace, tmp_path, capsys):
    assert infer(workspace, tmp_path / "missing", tmp_path / "o.jsonl") == 2
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert infer(workspace, bad, tmp_path / "o.jsonl") == 2
    weights = tmp_path / "cut.mvnw"
    weights.write_bytes(workspace["weights"].read_bytes()[:100])
    code = cli.main(["infer", "--weights", str(weights), "--input", str(workspace["seq"]), "--focal", "100",
                     "--out", str(tmp_path / "o.jsonl"), "--input-size", str(SIZE)])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_export_round_trips(workspace, tmp_path):
    stream = tmp_path / "s.jsonl"
    infer(workspace, workspace["seq"], stream)
    again = tmp_path / "again.jsonl"
    assert cli.main(["export", "--in", str(stream), "--format", "jsonl", "--out", str(again)]) == 0
    a, b = cli.read_jsonl(stream), cli.read_jsonl(again)
    for x, y in zip(a, b):
        for k in ("kp2d", "pose3d", "root", "rot", "crop"):
            np.testing.assert_allclose(x[k], y[k], atol=1e-9)
        assert x["lost"] == y["lost"] and x["frame"] == y["frame"]
    anim = tmp_path / "s.anim"
    assert cli.main(["export", "--in", str(stream), "--format", "anim", "--out", str(anim)]) == 0
    parsed = cli.read_anim(anim)
    assert len(parsed["t"]) == len(a)
    assert parsed["names"] == list(Skeleton().names)
    np.testing.assert_allclose(parsed["rot"], [r["rot"] for r in a], atol=1e-12)


def test_rest_pose_stream_exports_identity(tmp_path):
    rest = {"frame": 0, "t": 0.0, "kp2d": [[0.0, 0.0, 1.0]] * 15, "pose3d": Skeleton().rest_positions().tolist(),
            "root": [0.0, 0.0, 3000.0], "rot": [[1.0, 0.0, 0.0, 0.0]] * 15, "crop": [1.0, 0, 0, 0, 1.0, 0],
            "lost": False}
    src = tmp_path / "rest.jsonl"
    src.write_text(json.dumps(rest) + "\n" + json.dumps({**rest, "frame": 1, "t": 1 / 30}) + "\n")
    out = tmp_path / "rest.anim"
    assert cli.main(["export", "--in", str(src), "--format", "anim", "--out", str(out)]) == 0
    parsed = cli.read_anim(out)
    assert parsed["rot"].shape == (2, 15, 4)
    assert np.array_equal(parsed["rot"][..., 0], np.ones((2, 15)))


def test_export_rejects_unknown_format(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["export", "--in", "x", "--format", "fbx", "--out", "y"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "jsonl" in err and "anim" in err
    assert cli.main(["export", "--in", str(tmp_path / "none.jsonl"), "--format", "jsonl", "--out", "y"]) == 2


def test_bench_static_columns_reproduce(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    assert cli.main(["bench", "--variant", "a", "--variant", "c", "--runs", "10", "--warmup", "3",
                     "--input-size", "32", "--csv", str(csv_path)]) == 0
    first = capsys.readouterr().out
    rows = cli.bench_rows(["a", "c"], 10, 3, input_size=32)
    assert [r["params"] for r in rows] == [N.count_params(N.build(N.profile(v))) for v in "ac"]
    assert [r["macs"] for r in rows] == [N.count_flops(N.build(N.profile(v, input_size=32))) for v in "ac"]
    assert all(r["median_ms"] <= r["p90_ms"] for r in rows)
    assert "TypeA" in first and "TypeC" in first
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("variant,structure,params,macs,median_ms,p90_ms,host") and len(lines) == 3
    assert cli.main(["bench", "--runs", "5"]) == 2


def test_distill_command_outputs(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("alpha = 0.5\nepochs = 1\nteacher_epochs = 1\nseeds = 0\ntrain_samples = 16\n"
                   "val_samples = 4\ncalibration_samples = 8\n")
    out = tmp_path / "run"
    assert cli.main(["distill", "--config", str(cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "alpha=0.5" in text and "seeds" in text
    names = set(os.listdir(out))
    assert {"teacher.csv", "teacher.mvnw", "student_gt_seed0.csv", "student_distill_seed0.csv",
            "student_gt_seed0.mvnw", "student_distill_seed0.mvnw", "summary.csv"} <= names
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("seed,alpha_gt,alpha_distill") and summary[1].startswith("0,1.0,0.5,")
    recorded = float((out / "teacher.csv").read_text().splitlines()[-1].split(",")[2])
    teacher = N.build(N.detect_spec(str(out / "teacher.mvnw"), input_size=32), weights=str(out / "teacher.mvnw"),
                      dtype=np.float64)
    val = D.synth_dataset(4, 1234 + 1, 32)
    again = D.evaluate_mpjpe(teacher, D.stack_images(val), np.stack([s.gt_pose for s in val]))
    assert again == pytest.approx(recorded, abs=1e-6)


def test_distill_bad_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("alpha = 3\n")
    assert cli.main(["distill", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["distill", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 2
