import json
import logging
from typing import Literal, Optional

import pytest

from mpsr_engine.config import apply_mapping, parse_value, read_config_file
from mpsr_engine.errors import ConfigError
from mpsr_engine.losses import LossBreakdown
from mpsr_engine.telemetry.telemetry import DynamicJsonFormatter, SafeKVFormatter, setup_logging
from mpsr_engine.telemetry.telemetry_context import run_id_var, run_logging_session
from mpsr_engine.telemetry.trainlog import TrainLog, fingerprint, read_train_log
from mpsr_engine.trainer.schemas import TrainConfig


def _record(**extra):
    rec = logging.LogRecord("mpsr.test", logging.INFO, __file__, 1, "train.step", None, None)
    for k, v in extra.items():
        setattr(rec, k, v)
    return rec


def test_kv_formatter_appends_sorted_extras():
    line = SafeKVFormatter("%(message)s").format(_record(loss=0.123456789, iteration=3))
    assert line == "train.step | iteration=3 loss=0.123457"


def test_json_formatter_merges_extras():
    doc = json.loads(DynamicJsonFormatter().format(_record(iteration=3, where=object())))
    assert doc["msg"] == "train.step" and doc["logger"] == "mpsr.test"
    assert doc["iteration"] == 3
    assert isinstance(doc["where"], str)


def test_run_logging_session_tags_records(monkeypatch):
    monkeypatch.setenv("MPSR_LOG_JSON", "1")
    logger = setup_logging()
    seen = []

    class Keep(logging.Handler):
        def emit(self, record):
            seen.append(record)

    keep = Keep()
    logger.addHandler(keep)
    try:
        with run_logging_session("eval", run_id="r1") as rid:
            assert rid == "r1" and run_id_var.get() == "r1"
            with run_logging_session("inner") as inner:
                assert inner == "r1"
            logging.getLogger("mpsr.test").info("inside")
        logging.getLogger("mpsr.test").info("outside")
    finally:
        logger.removeHandler(keep)
    assert run_id_var.get() is None
    assert getattr(seen[0], "run_id") == "r1" and getattr(seen[0], "command") == "eval"
    assert not hasattr(seen[1], "run_id")


def test_train_log_lines(tmp_path):
    bd = LossBreakdown(0.5, 0.25, 1.0, 0.5, 0.1, 0.05, n_obj=32, m_obj=72, n_roi=16, m_roi=6)
    log = TrainLog(tmp_path / "sub" / "log.jsonl", stage="finetune", log_every=2)
    line = log.write(0, 0.01, bd, extra_counts={"improper_negatives": 7})
    log.write(1, 0.01, bd)
    assert line["counts"] == {"n_obj": 32, "m_obj": 72, "n_roi": 16, "m_roi": 6, "improper_negatives": 7}
    rows = read_train_log(tmp_path / "sub" / "log.jsonl")
    assert [r["iteration"] for r in rows] == [0, 1]
    assert rows[0]["losses"]["refine_rpn_bcls"] == 0.1 and rows[0]["lambda"] == 0.1
    assert read_train_log(tmp_path / "absent.jsonl") == []


def test_fingerprint_is_stable():
    a = TrainConfig().to_dict()
    assert fingerprint(a) == fingerprint(dict(reversed(list(a.items()))))
    assert fingerprint(a) != fingerprint(TrainConfig(seed=1).to_dict())
    assert len(fingerprint(b"bytes")) == 12


def test_read_config_file(tmp_path):
    p = tmp_path / "x.env"
    p.write_text("# comment\nSEED=3\nMode = mpsr\nEMPTY=\n")
    assert read_config_file(p) == {"seed": "3", "mode": "mpsr", "empty": ""}
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "missing.env")


@pytest.mark.parametrize("raw,hint,expected", [
    ("yes", bool, True),
    ("0", bool, False),
    (" 7 ", int, 7),
    ("480,576", tuple[int, ...], (480, 576)),
    ("100:0.01,50:0.001", tuple[tuple[int, float], ...], ((100, 0.01), (50, 0.001))),
    ("none", Optional[int], None),
    ("3", Optional[int], 3),
    ("scale_aug", Literal["none", "scale_aug"], "scale_aug"),
])
def test_parse_value(raw, hint, expected):
    assert parse_value(raw, hint) == expected


@pytest.mark.parametrize("raw,hint", [("maybe", bool), ("1:2:3", tuple[int, float]), ("x", Literal["a"])])
def test_parse_value_rejects(raw, hint):
    with pytest.raises(ValueError):
        parse_value(raw, hint)


def test_apply_mapping():
    cfg, rest = apply_mapping(TrainConfig(), {"seed": "4", "min_size": "96"}, strict=False)
    assert cfg.seed == 4 and rest == {"min_size": "96"}
    with pytest.raises(ConfigError, match="MIN_SIZE"):
        apply_mapping(TrainConfig(), {"min_size": "96"})
