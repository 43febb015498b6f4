import math

import numpy as np
import pytest

from dcformer.errors import ConfigError
from dcformer.sweep import SweepRow, end_of_training_nu, parse_value, run_config_for, run_sweep


def test_parse_value():
    assert parse_value("lambda", " 0.5") == 0.5
    assert parse_value("dwc", "off") == 0.0 and parse_value("dwc", "ON") == 1.0
    for axis, raw in [("dwc", "maybe"), ("lambda", "x"), ("num_tokens", "2.5"), ("num_tokens", "0"),
                      ("depth", "1")]:
        with pytest.raises(ConfigError):
            parse_value(axis, raw)


def test_run_config_for_sets_axis_and_seed(tiny_cfg):
    cfg = run_config_for(tiny_cfg(), "num_tokens", 3.0, 7)
    assert cfg.model.num_tokens == 3 and cfg.seed == 7
    assert run_config_for(tiny_cfg(), "dwc", 0.0, 0).model.dwc_enabled is False


def test_end_of_training_nu_averages_last_epoch():
    hist = [{"epoch": 0, "nu_1_2": 0.9}, {"epoch": 1, "nu_1_2": 0.4}, {"epoch": 1, "nu_1_2": 0.2}]
    assert end_of_training_nu(hist) == pytest.approx([0.3])
    assert end_of_training_nu([]).size == 0


def test_failed_row_csv():
    row = SweepRow("lambda", 1.0, 0, "failed", {}, [], "ValueError: x")
    cells = row.csv_row()
    assert cells[:4] == ["lambda", "1.0", "0", "failed"]
    assert math.isnan(float(cells[4])) and cells[-2] == "" and cells[-1] == "ValueError: x"


def test_identity_fraction_sweep_in_memory(tiny_cfg):
    rows = run_sweep(tiny_cfg(**{"data__num_identities": "16"}), "identity_fraction", [1.0, 0.5], [0],
                     evaluate=False)
    assert [r.value for r in rows] == [0.5, 1.0]
    assert all(r.status == "ok" for r in rows)
    assert all(np.isfinite(r.metrics["final_sdc"]) for r in rows)
