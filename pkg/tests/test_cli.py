import csv

import numpy as np
import pytest

from dcformer import tensor as T
from dcformer.cli import main
from dcformer.gradsuite import run_suite

from conftest import TINY


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()), encoding="utf-8")
    return path


def _train(tiny_file, out, *extra):
    return main(["train", "--config", str(tiny_file), "--out", str(out), *extra])


def test_train_writes_artifacts_and_plots(tiny_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(tiny_file, out) == 0
    for name in ("metrics.csv", "final.dcfw", "eval_report.csv", "distances.csv"):
        assert (out / name).is_file(), name
    svgs = sorted(p.name for p in (out / "plots").glob("*.svg"))
    assert "metrics_losses.svg" in svgs and "distances_distances.svg" in svgs
    text = capsys.readouterr().out
    assert "mAP" in text and "confusion" in text


def test_plots_are_byte_identical_across_runs(tiny_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(tiny_file, a) == 0 and _train(tiny_file, b) == 0
    names = sorted(p.name for p in (a / "plots").glob("*.svg"))
    assert names
    for n in names:
        assert (a / "plots" / n).read_bytes() == (b / "plots" / n).read_bytes(), n


def test_eval_subcommand(tiny_file, tmp_path):
    out = tmp_path / "run"
    assert _train(tiny_file, out, "--no-eval") == 0
    assert not (out / "eval_report.csv").exists()
    assert main(["eval", str(out / "final.dcfw"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "eval_report.csv").is_file()
    assert (tmp_path / "ev" / "plots" / "distances_distances.svg").is_file()


def test_unknown_key_exits_1(tiny_file, tmp_path, capsys):
    assert _train(tiny_file, tmp_path / "x", "--set", "model.bogus=3") == 1
    assert "bogus" in capsys.readouterr().err


def test_usage_error_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--seed", "notanint"])
    assert exc.value.code == 1


def test_missing_config_file_exits_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 3


def test_nan_loss_exits_2(tiny_file, tmp_path, monkeypatch):
    import dcformer.train as TR

    real = TR.total_loss

    def poisoned(*a, **k):
        rep = real(*a, **k)
        rep.total = rep.total * float("nan")
        return rep

    monkeypatch.setattr(TR, "total_loss", poisoned)
    assert _train(tiny_file, tmp_path / "n") == 2
    assert (tmp_path / "n" / "nan_dump.txt").is_file()


def test_plot_empty_metrics_fails_without_output(tmp_path, capsys):
    bad = tmp_path / "metrics.csv"
    bad.write_text("", encoding="utf-8")
    out = tmp_path / "plots"
    assert main(["plot", str(bad), "--out", str(out)]) == 3
    assert "empty" in capsys.readouterr().err
    assert not out.exists()


def test_plot_header_only_metrics_fails(tmp_path):
    bad = tmp_path / "metrics.csv"
    bad.write_text("step,epoch,loss_total\n", encoding="utf-8")
    assert main(["plot", str(bad), "--out", str(tmp_path / "p")]) == 3
    assert not (tmp_path / "p").exists()


def test_plot_bad_row_names_line(tmp_path, capsys):
    f = tmp_path / "distances.csv"
    f.write_text("kind,distance\npositive,1.0\nnegative,abc\n", encoding="utf-8")
    assert main(["plot", str(f), "--out", str(tmp_path / "p")]) == 3
    assert ":3:" in capsys.readouterr().err


def test_plot_distances_two_labeled_series(tmp_path):
    f = tmp_path / "distances.csv"
    rows = [["kind", "distance"]] + [["positive", repr(x)] for x in (0.5, 0.7, 0.9)] \
        + [["negative", repr(x)] for x in (1.5, 2.0, 2.5, 3.0)]
    with open(f, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    assert main(["plot", str(f), "--out", str(tmp_path / "p")]) == 0
    svgs = list((tmp_path / "p").glob("*.svg"))
    assert len(svgs) == 1
    text = svgs[0].read_text()
    assert "positive pairs" in text and "negative pairs" in text


def test_gradcheck_passes_and_strict_tol_fails(capsys):
    assert main(["gradcheck", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out
    assert main(["gradcheck", "--skip-model", "--tol", "1e-14"]) == 2


def test_corrupted_backward_is_named(monkeypatch):
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        if out.node is None:  # finite-difference passes build no graph
            return out
        inner = out.node.backward
        out.node.backward = lambda g: tuple(1.1 * v for v in inner(g))
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    results = {r.name: r for r in run_suite(include_model=False)}
    assert not results["gelu"].passed
    assert results["gelu"].worst is not None
    assert "FAIL gelu" in results["gelu"].line()
    assert results["exp"].passed


def test_sweep_lambda_writes_sorted_summary(tiny_file, tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(tiny_file), "--axis", "lambda", "--values", "1,0",
                 "--seeds", "0,1", "--out", str(out)])
    assert code == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(float(r["value"]), int(r["seed"])) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert all(r["status"] == "ok" for r in rows)
    assert all(np.isfinite(float(r["mAP"])) for r in rows)
    assert (out / "sweep_curves.csv").is_file()
    assert (out / "lambda=1.0" / "seed=0" / "metrics.csv").is_file()
    assert list(out.glob("*.svg"))


def test_sweep_continues_past_failing_cell(tiny_file, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(tiny_file), "--axis", "identity_fraction",
                 "--values", "1.0,0.01", "--out", str(out), "--no-eval"])
    assert code == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    status = {float(r["value"]): r["status"] for r in rows}
    assert status[1.0] == "ok"
    assert status[0.01] == "failed"
    assert rows[0]["error"]
    assert "failed" in capsys.readouterr().out


def test_sweep_bad_value_exits_1(tiny_file, tmp_path):
    assert main(["sweep", "--config", str(tiny_file), "--axis", "num_tokens", "--values", "1.5",
                 "--out", str(tmp_path / "s")]) == 1
