import json

import numpy as np
import pytest

from sptte import cli
from sptte.train import load_checkpoint
from sptte.trips import load_trips

SCENARIO = {"num_links": 10, "num_trips": 500, "days": 1, "min_trip_links": 7, "max_trip_links": 12, "seed": 3}
TRAIN = {"r_h": 3, "r_e": 3, "gru_hidden": 4, "eta": 3, "k_aug": 3, "batch_size": 16, "epochs": 2, "seed": 0}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.json").write_text(json.dumps(SCENARIO))
    (root / "train.json").write_text(json.dumps(TRAIN))
    data = root / "data"
    assert cli.main(["synth", "--config", str(root / "scenario.json"), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(root / "train.json"), "--data", str(data),
                     "--out", str(root / "model.zip")]) == 0
    return root


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def test_synth_outputs(workspace):
    data = workspace / "data"
    for name in ("links.csv", "edges.csv", "trips.csv", "train.csv", "val.csv", "test.csv",
                 "ground_truth.json", "manifest.json", "oracle.json"):
        assert (data / name).exists()
    man = json.loads((data / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["num_links"] == 10 and len(man["digest"]) == 64
    n = sum(len(load_trips(data / f)) for f in ("train.csv", "val.csv", "test.csv"))
    assert n == len(load_trips(data / "trips.csv"))


def test_checkpoint_embeds_manifest(workspace):
    _, meta = load_checkpoint(workspace / "model.zip")
    assert len(meta["manifest_digest"]) == 64
    assert str(workspace / "data" / "train.csv") in meta["manifest"]["inputs"]
    log = read_jsonl(workspace / "model.log.jsonl")
    assert [r["epoch"] for r in log] == [1, 2]


def test_eval_report(workspace, tmp_path):
    data = workspace / "data"
    out = tmp_path / "report.json"
    assert cli.main(["eval", "--model", str(workspace / "model.zip"), "--trips", str(data / "test.csv"),
                     "--baseline", str(data / "train.csv"), "--out", str(out),
                     "--slots", str(tmp_path / "slots.csv"), "--plot", str(tmp_path / "slots.png")]) == 0
    doc = json.loads(out.read_text())
    assert doc["report"]["n"] == len(load_trips(data / "test.csv"))
    assert doc["report"]["crps"] > 0 and "climatology" in doc
    assert (tmp_path / "slots.csv").read_text().startswith("slot_of_day")
    assert (tmp_path / "slots.png").stat().st_size > 0


def test_eval_of_perfect_predictions_is_zero(workspace, tmp_path):
    trips = load_trips(workspace / "data" / "test.csv")
    pred = tmp_path / "pred.jsonl"
    pred.write_text("".join(json.dumps({"trip_id": t.trip_id, "mean_s": t.total_time, "std_s": 0.0}) + "\n"
                            for t in trips))
    out = tmp_path / "r.json"
    assert cli.main(["eval", "--predictions", str(pred), "--trips", str(workspace / "data" / "test.csv"),
                     "--out", str(out)]) == 0
    rep = json.loads(out.read_text())["report"]
    assert rep["rmse"] == 0.0 and rep["mae"] == 0.0 and rep["mape"] == 0.0 and rep["crps"] == 0.0


def test_predict_and_interpolate_agree_at_slot(workspace, tmp_path):
    model, _ = load_checkpoint(workspace / "model.zip")
    trips = load_trips(workspace / "data" / "test.csv")
    slot = int(model.position(trips[0].depart_ts) + 0.5)
    same = [t for t in trips if int(model.position(t.depart_ts) + 0.5) == slot]
    q = tmp_path / "q.csv"
    from sptte.trips import save_trips

    save_trips(same, q)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["predict", "--model", str(workspace / "model.zip"), "--queries", str(q),
                     "--out", str(a), "--cov", str(tmp_path / "cov.npy")]) == 0
    assert cli.main(["interpolate", "--model", str(workspace / "model.zip"), "--queries", str(q),
                     "--slot", str(slot), "--fraction", "0", "--out", str(b)]) == 0
    assert read_jsonl(a) == read_jsonl(b)
    cov = np.load(tmp_path / "cov.npy")
    np.testing.assert_allclose(np.sqrt(np.diag(cov)), [r["std_s"] for r in read_jsonl(a)], rtol=1e-12)


def test_sparsify_and_export(workspace, tmp_path):
    out = tmp_path / "sparse"
    assert cli.main(["sparsify", "--data", str(workspace / "data"), "--temporal-keep", "0.5",
                     "--spatial-knockout", "0.2", "--seed", "1", "--out", str(out)]) == 0
    info = json.loads((out / "sparsify.json").read_text())
    assert len(info["knocked_links"]) == 2 and info["train_after"] < info["train_before"]
    assert (out / "test.csv").read_bytes() == (workspace / "data" / "test.csv").read_bytes()
    npz = tmp_path / "reprs.npz"
    assert cli.main(["export-reprs", "--model", str(workspace / "model.zip"), "--slots", "3,4",
                     "--out", str(npz)]) == 0
    with np.load(npz) as z:
        assert "slot3/mu" in z.files and z["slot3/mu"].shape[0] == 10


def test_check_grad_passes(capsys):
    assert cli.main(["check-grad", "--links", "8"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_exit_codes(workspace, tmp_path):
    data = workspace / "data"
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--trips", str(tmp_path / "nope.csv"), "--predictions", "x", "--out", "o"]) \
        == cli.EXIT_MISSING
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "m.zip")]) \
        == cli.EXIT_SCHEMA
    assert cli.main(["train", "--data", str(data), "--min-links", "100", "--out", str(tmp_path / "m.zip")]) \
        == cli.EXIT_SCHEMA
    big = tmp_path / "big.csv"
    big.write_text("trip_id,depart_ts,total_time,link_seq,duration_seq\n0,100,50,3;99,\n")
    assert cli.main(["predict", "--model", str(workspace / "model.zip"), "--queries", str(big),
                     "--out", str(tmp_path / "p.jsonl")]) == cli.EXIT_DIMENSION
    assert cli.main(["interpolate", "--model", str(workspace / "model.zip"), "--queries", str(big),
                     "--slot", "0", "--fraction", "2", "--out", str(tmp_path / "p.jsonl")]) == cli.EXIT_USAGE
    assert cli.main(["check-grad", "--links", "8", "--tolerance", "0"]) == cli.EXIT_NUMERIC


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SPTTE_THREADS", "many")
    assert cli.main(["check-grad", "--links", "6"]) == cli.EXIT_USAGE
