import argparse
import json
import time

import numpy as np
import pytest

from urbanicl.checkpoint import load_checkpoint, verify_checkpoint
from urbanicl.cli import build_parser, main
from urbanicl.config import DEFAULTS, RunConfig, resolve
from urbanicl.errors import ConfigError
from urbanicl.regions import RegionSet, load_profile_matrix_json, load_reference_embeddings, load_split

SMALL = ["--epochs", "2", "--layers", "2", "--dim", "16", "--heads", "2", "--T", "50", "--batch-size", "32"]


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    assert main(["gen-synth", "--regions", "16", "--profiles", "40", "--latent", "3", "--seed", "7", "--out", str(root / "d")]) == 0
    assert main(["train", "--data", str(root / "d/profiles.json"), "--ref", str(root / "d/reference.json"),
                 "--out", str(root / "run"), *SMALL]) == 0
    return root


def _json(path):
    return json.loads(path.read_text())


def test_gen_synth_deterministic_and_loadable(tmp_path, city):
    assert main(["gen-synth", "--regions", "16", "--profiles", "40", "--latent", "3", "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("profiles.json", "reference.json", "split.json", "mask.json", "indicator_0.csv"):
        assert (tmp_path / name).read_bytes() == (city / "d" / name).read_bytes()
    mat = load_profile_matrix_json(tmp_path / "profiles.json")
    assert len(mat) == 43
    load_reference_embeddings(tmp_path / "reference.json", RegionSet(16))
    load_split(tmp_path / "split.json", RegionSet(16))


def test_gen_synth_rejects_one_region(tmp_path, capsys):
    assert main(["gen-synth", "--regions", "1", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()
    assert "regions" in capsys.readouterr().err


def test_train_smoke(tmp_path, city):
    data = city / "d" / "profiles.json"
    start = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), *SMALL]) == 0
    assert time.perf_counter() - start < 30
    for name in ("final.ckpt", "best.ckpt", "loss_curve.csv", "train_summary.json"):
        assert (tmp_path / "r" / name).exists()
    assert verify_checkpoint(tmp_path / "r" / "final.ckpt")


def test_train_align_without_ref_is_config_error(tmp_path, city, capsys):
    code = main(["train", "--data", str(city / "d/profiles.json"), "--out", str(tmp_path / "r"),
                 "--lambda-align", "0.1", *SMALL])
    assert code == 2
    assert "--ref" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_train_invalid_flags_leave_no_output(tmp_path, city):
    base = ["train", "--data", str(city / "d/profiles.json"), "--out", str(tmp_path / "r")]
    assert main(base + ["--epochs", "0"]) == 2
    assert main(base + ["--dim", "10", "--heads", "4"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()


def test_config_file_precedence(tmp_path, city):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"epochs": 1, "hidden_dim": 8, "n_heads": 2, "n_layers": 2, "T": 20,
                                    "data": str(city / "d/profiles.json"), "out_dir": str(tmp_path / "r")}))
    assert main(["train", "--config", str(cfg_path), "--dim", "16"]) == 0
    _, model_cfg = load_checkpoint(tmp_path / "r" / "final.ckpt")
    assert model_cfg.hidden_dim == 16 and model_cfg.T == 20
    summary = _json(tmp_path / "r" / "train_summary.json")
    assert summary["train_config"]["epochs"] == 1
    cfg_path.write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--config", str(cfg_path)]) == 2


def test_resolve_defaults():
    cfg, explicit = resolve({"lr": None, "epochs": 5})
    assert cfg.epochs == 5 and cfg.lr == 4e-4 and explicit == {"epochs"}
    assert DEFAULTS == RunConfig()
    assert (DEFAULTS.lr, DEFAULTS.epochs, DEFAULTS.batch_size, DEFAULTS.lambda_mask, DEFAULTS.lambda_align) == (
        4e-4, 1000, 128, 0.3, 0.1)
    assert (DEFAULTS.n_layers, DEFAULTS.hidden_dim, DEFAULTS.n_heads, DEFAULTS.T, DEFAULTS.rounds) == (4, 128, 4, 1000, 10)
    assert DEFAULTS.train_config().lambda_align == 0.0  # no reference -> no alignment
    with pytest.raises(ConfigError):
        resolve({"bogus": 1})


def _infer(city, tmp_path, *extra, mask="split.json", rounds="3"):
    out = tmp_path / "p.json"
    code = main(["infer", "--checkpoint", str(city / "run/final.ckpt"), "--profile", str(city / "d/indicator_0.csv"),
                 "--mask-file", str(city / "d" / mask) if "/" not in mask else mask, "--rounds", rounds,
                 "--out", str(out), *extra])
    return code, out


def test_infer_echoes_observed_values(tmp_path, city):
    code, out = _infer(city, tmp_path)
    assert code == 0
    pred = _json(out)
    truth = np.loadtxt(city / "d/indicator_0.csv", delimiter=",", skiprows=1)[:, 1]
    observed = np.array(pred["mask"]) == 0
    raw = np.array(pred["mean_raw"])
    assert np.array_equal(raw[observed], truth[observed])
    norm = (truth - pred["norm_mean"]) / pred["norm_std"]
    for sample in pred["samples"]:
        assert np.array_equal(np.array(sample)[observed], norm[observed])
    assert len(pred["samples"]) == 3


def test_infer_single_round_and_determinism(tmp_path, city):
    code, out = _infer(city, tmp_path, rounds="1")
    assert code == 0 and len(_json(out)["samples"]) == 1
    first = out.read_bytes()
    assert _infer(city, tmp_path, rounds="1")[0] == 0
    assert out.read_bytes() == first


def test_infer_mask_covering_everything(tmp_path, city, capsys):
    mask = tmp_path / "all.json"
    mask.write_text(json.dumps({"mask": [1] * 16}))
    code, out = _infer(city, tmp_path, mask=str(mask))
    assert code == 2 and not out.exists()
    assert "observed" in capsys.readouterr().err


def test_infer_unknown_id_list(tmp_path, city):
    mask = tmp_path / "ids.json"
    mask.write_text(json.dumps({"unknown": [0, 5, 9]}))
    code, out = _infer(city, tmp_path, "--no-normalize", mask=str(mask))
    assert code == 0
    pred = _json(out)
    assert np.flatnonzero(pred["mask"]).tolist() == [0, 5, 9]
    assert pred["norm_mean"] == 0.0 and pred["norm_std"] == 1.0


def test_eval_identity_and_aggregate(tmp_path, city, capsys):
    truth = str(city / "d/indicator_0.csv")
    assert main(["eval", "--pred", truth, "--truth", truth, "--out", str(tmp_path / "r.json")]) == 0
    rep = _json(tmp_path / "r.json")
    assert rep["mae"] == 0 and rep["rmse"] == 0 and rep["n"] == 16

    preds = []
    for seed in range(3):
        out = tmp_path / f"p{seed}.json"
        assert main(["infer", "--checkpoint", str(city / "run/final.ckpt"), "--profile", truth,
                     "--mask-file", str(city / "d/split.json"), "--rounds", "2", "--seed", str(seed),
                     "--out", str(out)]) == 0
        preds.append(str(out))
    split = str(city / "d/split.json")
    singles = []
    for p in preds:
        assert main(["eval", "--pred", p, "--truth", truth, "--split", split, "--out", str(tmp_path / "s.json")]) == 0
        singles.append(_json(tmp_path / "s.json"))
    assert main(["eval", "--pred", *preds, "--truth", truth, "--split", split, "--aggregate",
                 "--out", str(tmp_path / "a.json")]) == 0
    agg = _json(tmp_path / "a.json")
    n_test = len(_json(city / "d/split.json")["test"])
    assert agg["n"] == n_test
    for key in ("mae", "rmse", "pcc"):
        assert agg[key] == pytest.approx(np.mean([s[key] for s in singles]), abs=1e-12)


def test_eval_constant_prediction_message(tmp_path, city, capsys):
    const = tmp_path / "c.csv"
    const.write_text("region_id,x\n" + "".join(f"{i},1.0\n" for i in range(16)))
    assert main(["eval", "--pred", str(const), "--truth", str(city / "d/indicator_0.csv")]) == 4
    assert "PCC is undefined" in capsys.readouterr().err


def test_analyze_commands(tmp_path, city):
    _, pred = _infer(city, tmp_path, rounds="20")
    region = int(np.flatnonzero(_json(pred)["mask"])[0])
    kde = tmp_path / "k.csv"
    assert main(["analyze", "kde", "--samples", str(pred), "--region", str(region), "--grid", "2001",
                 "--out", str(kde)]) == 0
    xy = np.loadtxt(kde, delimiter=",", skiprows=1)
    assert abs(np.trapezoid(xy[:, 1], xy[:, 0]) - 1) < 1e-2

    pts = tmp_path / "pts.csv"
    x = np.log2([0.125, 0.25, 0.5, 1.0])
    pts.write_text("x,y\n" + "".join(f"{float(a)!r},{float(2 * np.exp(-0.5 * a))!r}\n" for a in x))
    assert main(["analyze", "scaling", "--points", str(pts), "--out", str(tmp_path / "f.json")]) == 0
    fit = _json(tmp_path / "f.json")
    assert fit["a"] == pytest.approx(2) and fit["b"] == pytest.approx(-0.5) and fit["r2"] == pytest.approx(1)

    clusters = tmp_path / "c.csv"
    assert main(["analyze", "cluster", "--checkpoint", str(city / "run/final.ckpt"), "--k", "5", "--out", str(clusters)]) == 0
    rows = np.loadtxt(clusters, delimiter=",", skiprows=1, dtype=int)
    assert rows[:, 0].tolist() == list(range(16)) and set(rows[:, 1]) <= set(range(5))

    assert main(["analyze", "probe", "--embeddings", str(city / "d/reference.json"),
                 "--profile", str(city / "d/indicator_0.csv"), "--split", str(city / "d/split.json"),
                 "--out", str(tmp_path / "probe.json")]) == 0
    assert _json(tmp_path / "probe.json")["report"]["n"] == len(_json(city / "d/split.json")["test"])


def test_analyze_kde_bad_region(tmp_path, city):
    _, pred = _infer(city, tmp_path)
    assert main(["analyze", "kde", "--samples", str(pred), "--region", "99", "--out", str(tmp_path / "k.csv")]) == 2
    assert not (tmp_path / "k.csv").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--regions", "4", "--dim", "4", "--heads", "2", "--ref-dim", "2", "--T", "5"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "adaln_w" in out and "wq" in out
    assert main(["gradcheck", "--regions", "4", "--dim", "4", "--heads", "2", "--ref-dim", "2", "--T", "5",
                 "--corrupt", "layer0.wq"]) != 0
    assert "FAIL" in capsys.readouterr().out


def _walk(parser):
    yield parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                yield from _walk(sub)


def test_help_documents_every_default():
    for parser in _walk(build_parser()):
        for action in parser._actions:
            if action.help in (None, argparse.SUPPRESS) or isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)):
                continue
            if action.required:
                continue
            assert "default:" in action.help, f"{parser.prog} {action.option_strings}"
    for name in ("train", "infer"):
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
