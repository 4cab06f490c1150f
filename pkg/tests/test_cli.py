import json
import math
import os
import subprocess
import sys

import jsonschema
import pytest
from conftest import FIXTURES

from d2quant import formats
from d2quant.cli import main
from d2quant.quant import compression_ratio

CALIB = os.path.join(FIXTURES, "calib.txt")
SMALL_ARGS = ["--layers", "2", "--d-model", "32", "--heads", "2", "--d-ffn", "64", "--max-seq", "32"]


@pytest.fixture
def model(tmp_path):
    path = tmp_path / "m.d2q"
    assert main(["init", "--out", str(path), "--seed", "3", "--no-fit", *SMALL_ARGS]) == 0
    return path


def quantize(model, out, *extra):
    return main(["quantize", str(model), CALIB, "--calib-samples", "8", "--out", str(out), *extra])


def test_quantize_smoke(model, tmp_path, capsys):
    out = tmp_path / "q.d2q"
    assert quantize(model, out, "--group", "32") == 0
    assert out.exists()
    doc = json.loads((tmp_path / "q.d2q.report.json").read_text())
    jsonschema.validate(doc, formats.schema("quantize_report"))
    assert "quantized 2 blocks at 2 bits" in capsys.readouterr().out
    assert formats.load_model(out).blocks[0].w_q.bits == 2


def test_quantize_is_deterministic(model, tmp_path):
    a, b = tmp_path / "a.d2q", tmp_path / "b.d2q"
    assert quantize(model, a, "--seed", "4") == 0
    assert quantize(model, b, "--seed", "4") == 0
    assert a.read_bytes() == b.read_bytes()


def test_bad_bits_writes_nothing(model, tmp_path):
    out = tmp_path / "q.d2q"
    with pytest.raises(SystemExit) as exc:
        quantize(model, out, "--bits", "5")
    assert exc.value.code == 2
    assert not out.exists()


def test_exit_codes(model, tmp_path):
    out = tmp_path / "q.d2q"
    assert quantize(model, out, "--group", "48") == 2
    assert quantize(model, model) == 2
    assert not out.exists()
    junk = tmp_path / "junk.d2q"
    junk.write_bytes(b"garbage")
    assert quantize(junk, out) == 3
    empty = tmp_path / "empty.txt"
    empty.write_bytes(b"")
    assert main(["quantize", str(model), str(empty), "--out", str(out)]) == 4
    assert main(["quantize", str(model), CALIB, "--calib-samples", "2", "--out", str(out),
                 "--report", str(tmp_path / "missing" / "r.json")]) == 5
    assert main(["eval", str(model), str(empty)]) == 4


def test_input_artifact_not_mutated(model, tmp_path):
    before = model.read_bytes()
    quantize(model, tmp_path / "q.d2q")
    main(["diagnose", str(model), CALIB, "--calib-samples", "4"])
    assert model.read_bytes() == before


def test_eval_uniform_head(tmp_path):
    path = tmp_path / "u.d2q"
    main(["init", "--out", str(path), "--no-fit", *SMALL_ARGS])
    m = formats.load_model(path)
    m.head[:] = 0
    formats.save_model(m, path)
    out = tmp_path / "e.json"
    assert main(["eval", str(path), CALIB, "--json", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["perplexity"] == pytest.approx(256.0, rel=1e-12)
    assert doc["mean_nll"] == pytest.approx(math.log(256), rel=1e-12)


def test_eval_identity_matches_full_precision(model, tmp_path):
    from d2quant.pipeline import PipelineConfig, run_d2quant
    from d2quant.quant import QuantConfig

    m = formats.load_model(model)
    calib = formats.load_calibration(CALIB, 4, 32)
    qm, _ = run_d2quant(m, calib, PipelineConfig(quant=QuantConfig(2, 32), identity=True))
    ident = tmp_path / "id.d2q"
    formats.save_model(qm, ident)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["eval", str(model), CALIB, "--json", str(a)])
    main(["eval", str(ident), CALIB, "--json", str(b), "--reference", str(model)])
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    assert abs(da["perplexity"] - db["perplexity"]) <= 1e-9
    assert all(v["frobenius_rel_err"] == 0 for v in db["reconstruction"].values())


def test_eval_is_bit_stable(model, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["eval", str(model), CALIB, "--json", str(a)])
    main(["eval", str(model), CALIB, "--json", str(b)])
    assert a.read_bytes() == b.read_bytes()
    jsonschema.validate(json.loads(a.read_text()), formats.schema("eval_result"))


def test_diagnose(model, tmp_path):
    out = tmp_path / "s.json"
    assert main(["diagnose", str(model), CALIB, "--calib-samples", "4", "--identity", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, formats.schema("snr_report"))
    assert doc["summary"]["mean_snr_post_attn"] == 0 and doc["summary"]["mean_snr_pre_norm"] == 0
    assert main(["diagnose", str(model), CALIB, "--calib-samples", "4", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert all(len(b["post_attn"]["snr_diag"]) == 32 for b in doc["blocks"])


def test_inspect_ratio(model, tmp_path, capsys):
    out = tmp_path / "q.d2q"
    quantize(model, out, "--group", "32")
    capsys.readouterr()
    assert main(["inspect", str(out), "--tensors"]) == 0
    text = capsys.readouterr().out
    expected = 16 / (2 + 32 / 32)
    assert f"theoretical ratio vs fp16 {expected:.4f}" in text
    assert compression_ratio(2, 32) == pytest.approx(expected)
    assert "blocks.0.w_down" in text


def test_ablate(model, tmp_path):
    out = tmp_path / "ab.json"
    args = ["ablate", str(model), CALIB, "--calib-samples", "4", "--seq-len", "16", "--dsq-iters", "2",
            "--out", str(out)]
    assert main(args) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, formats.schema("ablation_report"))
    assert len(doc["rows"]) == 13
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_report_diff(model, tmp_path, capsys):
    a, b = tmp_path / "a.d2q", tmp_path / "b.d2q"
    quantize(model, a)
    quantize(model, b, "--no-dac")
    capsys.readouterr()
    assert main(["report", str(a) + ".report.json", str(b) + ".report.json"]) == 0
    assert "mean_realized_reduction" in capsys.readouterr().out


def test_corpus(tmp_path):
    out = tmp_path / "c.txt"
    assert main(["corpus", "--out", str(out), "--bytes", "500", "--seed", "1"]) == 0
    assert len(out.read_bytes()) == 500


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "d2quant.cli", "inspect", str(tmp_path / "none")],
                       capture_output=True, text=True)
    assert r.returncode == 3 and "artifact error" in r.stderr


def test_thread_count_does_not_change_artifact(model, tmp_path, monkeypatch):
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("D2Q_THREADS", threads)
        out = tmp_path / f"t{threads}.d2q"
        assert quantize(model, out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
