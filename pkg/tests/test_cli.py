import csv
import json

import pytest

from drmm import cli, model

TRAIN = ["--steps", "6", "--batch-size", "8", "--proposals", "6", "--hidden", "16"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "train.jsonl", "--scenes", 16, "--seed", 1) == 0
    assert run("gen-data", "--out", d / "val.jsonl", "--scenes", 8, "--seed", 2) == 0
    assert run("train", "--data", d / "train.jsonl", "--out", d / "w.json", "--history", d / "h.csv", *TRAIN) == 0
    return d


def test_gen_data_is_deterministic(work):
    run("gen-data", "--out", work / "again.jsonl", "--scenes", 16, "--seed", 1)
    assert (work / "again.jsonl").read_bytes() == (work / "train.jsonl").read_bytes()


def test_train_outputs(work):
    _, cfg, meta = model.load_weights(work / "w.json")
    assert cfg.num_proposals == 6
    rows = list(csv.reader(open(work / "h.csv")))
    assert len(rows) == 7 and rows[0][:2] == ["step", "total"]


def test_nll_only_equals_beta_zero(work):
    run("train", "--data", work / "train.jsonl", "--out", work / "a.json", "--mode", "nll-only", *TRAIN)
    run("train", "--data", work / "train.jsonl", "--out", work / "b.json", "--mode", "drmm", "--beta", 0, *TRAIN)
    wa, _, _ = model.load_weights(work / "a.json")
    wb, _, _ = model.load_weights(work / "b.json")
    assert all((wa[k] == wb[k]).all() for k in wa)


def test_eval_nms_one_equals_none(work):
    outs = []
    for t in ("1.0", "none"):
        rep, pred = work / f"r{t}.json", work / f"p{t}.jsonl"
        assert run("eval", "--data", work / "val.jsonl", "--weights", work / "w.json", "--nms-thresh", t,
                   "--report", rep, "--predictions", pred, "--csv-dir", work / f"csv{t}") == 0
        outs.append((rep.read_bytes(), pred.read_bytes()))
    assert outs[0] == outs[1]
    report = json.loads(outs[0][0])
    assert {"ap", "ap50", "ap75", "ar", "ece", "dup_rate", "reliability_bins", "per_stage_losses"} <= set(report)


def test_eval_wta_flag(work):
    assert run("eval", "--data", work / "val.jsonl", "--weights", work / "w.json", "--nms-thresh", "0.5", "--wta") == 0


def test_sweep_beta_emits_four_rows(work):
    out = work / "beta.csv"
    assert run("sweep", "--param", "beta", "--values", 0.4, 0.5, 0.6, 0.7, "--csv", out,
               "--data", work / "train.jsonl", "--eval-data", work / "val.jsonl", *TRAIN) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["value"] for r in rows] == ["0.4", "0.5", "0.6", "0.7"]
    assert "stage2_ratio" in rows[0]


def test_sweep_nms_with_weights(work):
    out = work / "nms.csv"
    assert run("sweep", "--param", "nms-thresh", "--values", 0.5, 1.0, "none", "--csv", out,
               "--data", work / "val.jsonl", "--weights", work / "w.json") == 0
    rows = list(csv.DictReader(open(out)))
    assert rows[1]["ap"] == rows[2]["ap"]


def test_sweep_copies_bipartite(work):
    out = work / "copies.csv"
    assert run("sweep", "--param", "copies", "--values", 1, 2, "--csv", out, "--mode", "bipartite:eq1",
               "--data", work / "train.jsonl", *TRAIN) == 0
    assert "ap_nms50" in list(csv.DictReader(open(out)))[0]


def test_gradcheck_exit_codes(work):
    assert run("gradcheck", "--data", work / "train.jsonl", "--weights", work / "w.json", "--n-weights", 30) == 0
    assert run("gradcheck", "--data", work / "train.jsonl", "--proposals", 4, "--tol", 1e-30) == 1


def test_threads_do_not_change_outputs(work):
    for n in (1, 3):
        run("train", "--data", work / "train.jsonl", "--out", work / f"t{n}.json", "--threads", n, *TRAIN)
    assert (work / "t1.json").read_bytes() == (work / "t3.json").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_error_exit_codes(work, capsys):
    assert run("eval", "--data", work / "missing.jsonl", "--weights", work / "w.json") == 4
    assert run("train", "--data", work / "train.jsonl", "--out", work / "x.json", "--mode", "bogus") == 2
    assert run("train", "--data", work / "train.jsonl", "--out", work / "x.json", "--topk-ratio", 0, *TRAIN) == 2
    assert run("train", "--data", work / "train.jsonl", "--out", work / "x.json", "--lr", 1e308,
               "--optimizer", "sgd", *TRAIN) == 3
    assert run("train", "--data", work / "train.jsonl", "--out", work / "nodir" / "x.json", *TRAIN) == 4
    bad = work / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("eval", "--data", bad, "--weights", work / "w.json") == 4
    assert "drmm:" in capsys.readouterr().err
