import json
import shutil

import jsonschema
import numpy as np
import pytest

from conftest import SMOKE_INI
from tdnnq import cli
from tdnnq.model_io import load_model, save_features
from tdnnq.report import report_digest, validate_report
from tdnnq.tdnn import models_equal

PINNED_REFERENCE_ACCURACY = 0.91735  # float eval accuracy of configs/reference.ini, seed 0


def run(*args):
    return cli.main([str(a) for a in args])


def read(path):
    return json.loads(path.read_text())


# -- usage and configuration ------------------------------------------------------


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert run("train-toy", tmp_path / "nope.ini", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_arguments_exit_2(capsys):
    assert run("quantize") == 2
    assert run("frobnicate") == 2
    assert run("eval", "m", "f", "--runs", "3") in (1, 2)


@pytest.mark.parametrize("text,needle", [
    ("[toy]\nseed = 1\nepochz = 3\n", ":3: unknown key 'epochz'"),
    ("[toy]\nseed = 1\n\nepochs = many\n", ":4: bad value for 'epochs'"),
    ("[toy]\nseed = 1\nthis line is broken\n", ":3: cannot parse"),
    ("seed = 1\n", ":1:"),
    ("[toy]\nseed = 1\nseed = 2\n", ":3:"),
    ("[toys]\nseed = 1\n", "unknown section [toys]"),
    ("[qat]\nschedule = sometimes\n", "invalid [qat] section"),
    ("[qat]\ntarget_scheme = weights-only\n", "target_scheme"),
])
def test_config_diagnostics(tmp_path, capsys, text, needle):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    assert run("train-toy", p, "--out", tmp_path / "o") == 2
    assert needle in capsys.readouterr().err


def test_config_values():
    cfg, opts = cli.load_config(SMOKE_INI)
    assert cfg.seed == 3 and cfg.num_classes == 11 and cfg.context == (-1, 0, 1)
    assert opts.target_scheme == "full-requant" and opts.make_schedule().kind == "full_epoch"


# -- train-toy --------------------------------------------------------------------


def test_train_toy_outputs(smoke_run):
    rep = read(smoke_run.dir / "train_report.json")
    validate_report(rep)
    assert rep["command"] == "train-toy"
    assert rep["size_ratio"] == 1.0
    assert len(rep["details"]["curve"]) == 2
    assert smoke_run.model.metadata["seed"] == 3


def test_train_toy_deterministic(smoke_run, tmp_path):
    assert run("train-toy", SMOKE_INI, "--out", tmp_path) == 0
    for name in ("float.tdnq", "train.npz", "eval.npz", "calib.npz"):
        assert (tmp_path / name).read_bytes() == (smoke_run.dir / name).read_bytes(), name
    assert report_digest(read(tmp_path / "train_report.json")) == report_digest(read(smoke_run.dir / "train_report.json"))


def test_reference_accuracy_pinned(reference_run):
    rep = read(reference_run.dir / "train_report.json")
    assert abs(rep["eval_accuracy"] - PINNED_REFERENCE_ACCURACY) <= 0.001
    assert rep["eval_accuracy"] >= 0.90


# -- quantize ---------------------------------------------------------------------


@pytest.mark.parametrize("bits,ratio", [(8, 0.25), (16, 0.5)])
def test_quantize_weight_only_ratio(smoke_run, tmp_path, bits, ratio):
    out = tmp_path / f"w{bits}.tdnq"
    assert run("quantize", smoke_run.dir / "float.tdnq", out, "--bits", bits) == 0
    rep = read(tmp_path / f"w{bits}.tdnq.json")
    assert rep["size_ratio"] == ratio
    assert rep["weight_bytes"] * 32 == rep["baseline_weight_bytes"] * bits
    assert rep["quant_config"]["scheme"] == "weights-only"


def test_quantize_full_custom_report(smoke_run, tmp_path):
    out = tmp_path / "c.tdnq"
    assert run("quantize", smoke_run.dir / "float.tdnq", out, "--scheme", "full-custom",
               "--calib", smoke_run.dir / "calib.npz", "--report", tmp_path / "r.json") == 0
    rep = read(tmp_path / "r.json")
    validate_report(rep)
    model = load_model(out)
    assert len(rep["layers"]) == len(model.all_layers)
    for row, layer in zip(rep["layers"], model.all_layers):
        assert row["activation"]["scale"] == layer.act_qparams.scale
        assert row["weights"]["weights"]["scale"] == layer.weight_qparams["weights"].scale
        assert row["saturation"]["total"] > 0


def test_quantize_missing_calibration(smoke_run, tmp_path, capsys):
    assert run("quantize", smoke_run.dir / "float.tdnq", tmp_path / "x.tdnq", "--scheme", "full-requant") == 2
    assert "calibration" in capsys.readouterr().err
    assert not (tmp_path / "x.tdnq").exists()


def test_corrupt_model_is_runtime_error(smoke_run, tmp_path, capsys):
    bad = tmp_path / "bad.tdnq"
    data = bytearray((smoke_run.dir / "float.tdnq").read_bytes())
    bad.write_bytes(bytes(data[: len(data) // 2]))
    assert run("quantize", bad, tmp_path / "o.tdnq") == 1
    assert "truncated" in capsys.readouterr().err
    assert run("eval", tmp_path / "missing.tdnq", smoke_run.dir / "eval.npz") == 1


# -- eval ---------------------------------------------------------------------------


def test_eval_repeatable_with_latency(smoke_run, tmp_path):
    q = tmp_path / "c.tdnq"
    run("quantize", smoke_run.dir / "float.tdnq", q, "--scheme", "full-custom", "--calib", smoke_run.dir / "calib.npz")
    reps = {}
    for name, model in (("float", smoke_run.dir / "float.tdnq"), ("int8", q)):
        for k in range(2):
            assert run("eval", model, smoke_run.dir / "eval.npz", "--report", tmp_path / f"{name}{k}.json") == 0
        a, b = read(tmp_path / f"{name}0.json"), read(tmp_path / f"{name}1.json")
        assert a["eval_accuracy"] == b["eval_accuracy"]
        assert report_digest(a) == report_digest(b)
        assert a["timing"]["runs"] >= 30 and a["timing"]["warmup"] >= 5 and a["timing"]["median_seconds"] > 0
        reps[name] = a
    assert reps["float"]["details"]["path"] == "float" and reps["int8"]["details"]["path"] == "integer"


def test_eval_length_mismatch(smoke_run, tmp_path, capsys):
    with np.load(smoke_run.dir / "eval.npz") as z:
        save_features(tmp_path / "short.npz", z["features"][:, :-1], z["labels"][:, :-1])
        labels_only = tmp_path / "labels.npz"
        np.savez(labels_only, features=z["features"][:3], labels=z["labels"][:3])
    assert run("eval", smoke_run.dir / "float.tdnq", smoke_run.dir / "eval.npz", labels_only) == 1
    assert "not aligned" in capsys.readouterr().err


def test_eval_text_features(smoke_run, tmp_path):
    with np.load(smoke_run.dir / "eval.npz") as z:
        x, y = z["features"][:4], z["labels"][:4]
    save_features(tmp_path / "f.txt", x)
    (tmp_path / "l.txt").write_text("\n\n".join("\n".join(map(str, u)) for u in y) + "\n")
    assert run("eval", smoke_run.dir / "float.tdnq", tmp_path / "f.txt", tmp_path / "l.txt") == 0


# -- compare ------------------------------------------------------------------------


def test_compare_self_identical(smoke_run, tmp_path):
    m = smoke_run.dir / "float.tdnq"
    shutil.copy(m, tmp_path / "float.tdnq")
    assert run("compare", m, tmp_path / "float.tdnq", "--eval", smoke_run.dir / "eval.npz",
               "--json", tmp_path / "c.json") == 0
    rows = read(tmp_path / "c.json")["rows"]
    assert rows[0] == rows[1]


def test_compare_four_schemes(smoke_run, tmp_path, capsys):
    d = smoke_run.dir
    run("quantize", d / "float.tdnq", tmp_path / "wo.tdnq")
    run("quantize", d / "float.tdnq", tmp_path / "fc.tdnq", "--scheme", "full-custom", "--calib", d / "calib.npz")
    assert run("qat", d / "float.tdnq", "--config", SMOKE_INI, "--train", d / "train.npz", "--out",
               tmp_path / "qat.tdnq") == 0
    run("quantize", tmp_path / "qat.tdnq", tmp_path / "qatq.tdnq", "--scheme", "full-requant",
        "--ranges", tmp_path / "qat.tdnq.qat.json")
    capsys.readouterr()
    assert run("compare", d / "float.tdnq", tmp_path / "wo.tdnq", tmp_path / "fc.tdnq", tmp_path / "qatq.tdnq",
               "--eval", d / "eval.npz", "--json", tmp_path / "c.json") == 0
    text = capsys.readouterr().out
    rep = read(tmp_path / "c.json")
    validate_report(rep)
    assert [r["scheme"] for r in rep["rows"]] == ["float", "weights-only", "full-custom", "full-requant"]
    assert [r["size_ratio"] for r in rep["rows"]] == [1.0, 0.25, 0.25, 0.25]
    for scheme in ("float", "weights-only", "full-custom", "full-requant"):
        assert scheme in text
    assert json.loads(json.dumps(rep)) == rep


def test_compare_needs_two_and_same_dims(smoke_run, tmp_path, toy_model):
    from tdnnq.model_io import save_model
    assert run("compare", smoke_run.dir / "float.tdnq") == 2
    save_model(toy_model, tmp_path / "other.tdnq")
    assert run("compare", smoke_run.dir / "float.tdnq", tmp_path / "other.tdnq") == 1


def test_compare_schema_rejects_tampering(smoke_run, tmp_path):
    m = smoke_run.dir / "float.tdnq"
    run("compare", m, m, "--json", tmp_path / "c.json")
    rep = read(tmp_path / "c.json")
    rep["rows"][0]["params"] = "many"
    with pytest.raises(jsonschema.ValidationError):
        validate_report(rep)


# -- qat ----------------------------------------------------------------------------


def _qat(d, out, *extra):
    return run("qat", d / "float.tdnq", "--config", SMOKE_INI, "--train", d / "train.npz", "--out", out, *extra)


def test_qat_sidecar_and_fraction_zero(smoke_run, tmp_path):
    d = smoke_run.dir
    assert _qat(d, tmp_path / "full.tdnq") == 0
    assert _qat(d, tmp_path / "fin.tdnq", "--schedule", "final-iterations", "--fraction", "0") == 0
    side = read(tmp_path / "full.tdnq.qat.json")
    assert side["format"] == cli.SIDECAR_FORMAT and len(side["state"]["ranges"]) == len(smoke_run.model.all_layers)
    assert side["state"]["out_ranges"] is not None
    a, b = load_model(tmp_path / "full.tdnq"), load_model(tmp_path / "fin.tdnq")
    assert models_equal(a, b.__class__(b.layers, b.head, b.head_kind, b.name, a.metadata))
    assert side["state"] == read(tmp_path / "fin.tdnq.qat.json")["state"]


def test_qat_resume(smoke_run, tmp_path):
    d = smoke_run.dir
    assert _qat(d, tmp_path / "a.tdnq") == 0
    assert _qat(d, tmp_path / "b.tdnq", "--stop-after-steps", "4") == 0
    assert not (tmp_path / "b.tdnq").exists()
    assert _qat(d, tmp_path / "b.tdnq", "--resume", tmp_path / "b.tdnq.resume.npz") == 0
    assert (tmp_path / "a.tdnq").read_bytes() == (tmp_path / "b.tdnq").read_bytes()
    assert read(tmp_path / "a.tdnq.qat.json")["state"] == read(tmp_path / "b.tdnq.qat.json")["state"]


def test_qat_corrupt_checkpoint(smoke_run, tmp_path, capsys):
    bad = tmp_path / "bad.tdnq"
    bad.write_bytes(b"TDNQ" + b"\x00" * 20)
    assert run("qat", bad, "--config", SMOKE_INI, "--train", smoke_run.dir / "train.npz", "--out",
               tmp_path / "o.tdnq") == 1
    (tmp_path / "r.npz").write_bytes(b"junk")
    assert _qat(smoke_run.dir, tmp_path / "o.tdnq", "--resume", tmp_path / "r.npz") == 1


def test_qat_reference_beats_ptq(reference_run, tmp_path):
    d = reference_run.dir
    ini = d.parent / "ref.ini"
    from conftest import REFERENCE_INI
    shutil.copy(REFERENCE_INI, ini)
    assert run("qat", d / "float.tdnq", "--config", ini, "--train", d / "train.npz", "--out", tmp_path / "q.tdnq") == 0
    assert run("quantize", tmp_path / "q.tdnq", tmp_path / "qq.tdnq", "--scheme", "full-requant",
               "--ranges", tmp_path / "q.tdnq.qat.json") == 0
    assert run("quantize", d / "float.tdnq", tmp_path / "p.tdnq", "--scheme", "full-requant",
               "--calib", d / "calib.npz") == 0
    for name in ("qq", "p"):
        assert run("eval", tmp_path / f"{name}.tdnq", d / "eval.npz", "--report", tmp_path / f"{name}.json") == 0
    qat_acc = read(tmp_path / "qq.json")["eval_accuracy"]
    ptq_acc = read(tmp_path / "p.json")["eval_accuracy"]
    assert qat_acc >= ptq_acc


def test_factorize_command(smoke_run, tmp_path):
    assert run("factorize", smoke_run.dir / "float.tdnq", tmp_path / "f.tdnq") == 0
    rep = read(tmp_path / "f.tdnq.json")
    assert abs(rep["details"]["param_ratio"] - 3.1 / 7.9) < 0.03
    assert load_model(tmp_path / "f.tdnq").all_layers[0].kind == "factorized"


def test_log_env(monkeypatch, smoke_run, tmp_path):
    monkeypatch.setenv("TDNNQ_LOG", "debug")
    assert run("quantize", smoke_run.dir / "float.tdnq", tmp_path / "o.tdnq") == 0
