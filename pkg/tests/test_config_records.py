import json

import pytest

from bgl.config import ConfigError, ExperimentConfig, load_config, parse_config, with_seed
from bgl.records import RunRecord, rows_csv, summarize, write_csv


def test_defaults_match_desk_scale_setup():
    cfg = ExperimentConfig()
    assert cfg.run.seeds == (1, 2, 3)
    assert cfg.pipeline.image_size == 32 and cfg.pipeline.n_train == 200 and cfg.pipeline.n_val == 50
    assert cfg.compare.outer_steps == 300 and cfg.compare.ibgl_k == 80


def test_parse_values():
    cfg = parse_config("""
[run]
seeds = 4, 5
figures = false
[pipeline]
gain_range = (0.2, 0.4)
image_size = 16
[compare]
strategies = ("tbgl",)
upper_lr_init = 1e-2
""")
    assert cfg.run.seeds == (4, 5)
    assert cfg.run.figures is False
    assert cfg.pipeline.gain_range == (0.2, 0.4)
    assert cfg.compare.strategies == ("tbgl",)
    assert cfg.compare.upper_lr_init == 0.01


@pytest.mark.parametrize("text", [
    "[run]\nseedz = 1\n",
    "[bogus]\nx = 1\n",
    "[compare]\nouter_steps = many\n",
    "[run]\nfigures = 3\n",
    "[pipeline]\ns_min = 2.0\n",
    "[estimator]\nibgl_f_batch = test\n",
    "no section header",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.ini")
    assert load_config(None) == ExperimentConfig()


def test_round_trip_and_hash():
    cfg = parse_config("[compare]\nouter_steps = 7\n[run]\nseeds = (9,)\n")
    again = parse_config(cfg.dumps())
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert len(cfg.hash()) == 16
    assert cfg.hash() != ExperimentConfig().hash()
    # formatting does not matter, only values
    assert parse_config("[compare]\nouter_steps=7\n\n[run]\nseeds=9,\n").hash() == cfg.hash()


def test_with_seed():
    cfg = ExperimentConfig()
    assert with_seed(cfg, None) is cfg
    assert with_seed(cfg, 8).run.seeds == (8,)
    assert with_seed(cfg, 8, data=True).run.data_seed == 8
    with pytest.raises(ConfigError):
        with_seed(cfg, 2 ** 64)


ROWS = [
    {"phase": "outer", "step": 0, "upper_loss": 2.0, "lg_grad_evals": 3, "outer_updates": 1},
    {"phase": "outer", "step": 1, "upper_loss": 1.5, "lg_grad_evals": 6, "outer_updates": 2},
    {"phase": "eval", "step": 2, "psnr": 12.5, "ssim": 0.3, "l1": 0.2},
]


def test_summary_recomputes_from_rows(tmp_path):
    rec = RunRecord("tbgl_seed1", "abc", list(ROWS), meta={"seed": 1}).finalize()
    assert rec.summary == {"outer_steps": 2, "final_upper_loss": 1.5, "lg_grad_evals": 6, "outer_updates": 2,
                           "psnr": 12.5, "ssim": 0.3, "l1": 0.2}
    back = RunRecord.load(rec.save(tmp_path / "r.json"))
    assert back.check() and back.summary == rec.summary
    assert back.build.startswith("bgl-")
    back.summary["psnr"] = 99.0
    assert not back.check()


def test_record_rows_must_be_monotone():
    with pytest.raises(ValueError):
        RunRecord("x", "h", [ROWS[1], ROWS[0]]).finalize()


def test_non_finite_values_serialise(tmp_path):
    rec = RunRecord("x", "h", [{"phase": "eval", "step": 0, "psnr": float("inf")}]).finalize()
    body = json.loads(rec.save(tmp_path / "r.json").read_text())
    assert body["summary"]["psnr"] == "inf"


def test_csv_format(tmp_path):
    text = rows_csv([{"a": 0.1, "b": 1}, {"a": 1 / 3}], ["a", "b"])
    assert text == "a,b\n0.1,1\n0.3333333333333333,\n"
    assert summarize([]) == {"outer_steps": 0}
    assert write_csv(tmp_path / "x.csv", [{"a": 1}]).read_text() == "a\n1\n"
