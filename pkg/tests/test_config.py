from pathlib import Path

import pytest

from cyclewatch.config import ROOT_ENV, RunConfig, build_config, load_config, parse_config_text
from cyclewatch.errors import ConfigInvalid


def test_parse_key_values_and_comments():
    text = """
    # a comment
    cells = 4          # trailing comment
    seed=7
    lambda = 0.2
    realtime = yes
    """
    assert parse_config_text(text) == {"cells": "4", "seed": "7", "lambda": "0.2", "realtime": "yes"}


def test_unknown_key_and_bad_line():
    with pytest.raises(ConfigInvalid):
        parse_config_text("colour = red")
    with pytest.raises(ConfigInvalid):
        parse_config_text("just words")


def test_typed_build(tmp_path):
    cfg = build_config({"root": str(tmp_path), "cells": "3", "anomaly_rate": "0.1", "lambda": "0.3",
                        "W": "5", "warmup": "8", "realtime": "true", "retention_bytes": "none"})
    assert cfg.cells == 3 and cfg.anomaly_rate == 0.1 and cfg.realtime is True
    assert cfg.analytics.lam == 0.3 and cfg.analytics.W == 5
    assert cfg.retention_bytes is None
    assert cfg.store == tmp_path / "store.ccf"


def test_flags_override_file(tmp_path):
    f = tmp_path / "run.conf"
    f.write_text("cells = 4\nseed = 1\n", encoding="utf-8")
    cfg = load_config(f, {"root": str(tmp_path), "seed": 9, "cells": None})
    assert (cfg.cells, cfg.seed) == (4, 9)


@pytest.mark.parametrize("bad", [
    {"cells": "0"}, {"cells": "many"}, {"broker": "nohost"}, {"broker": "h:99999"},
    {"alpha": "1.5"}, {"warmup": "3"}, {"anomaly_rate": "0.7"},
])
def test_invalid_values(tmp_path, bad):
    with pytest.raises(ConfigInvalid):
        build_config({"root": str(tmp_path), **bad})


def test_paths_must_be_distinct(tmp_path):
    with pytest.raises(ConfigInvalid):
        RunConfig(root=tmp_path, store=tmp_path / "x", reports=tmp_path / "x")


def test_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(ROOT_ENV, str(tmp_path / "env-root"))
    assert RunConfig().root == Path(tmp_path / "env-root")


def test_to_dict_includes_analytics(tmp_path):
    d = RunConfig(root=tmp_path).to_dict()
    assert d["W"] == 10 and d["lambda"] == 0.1 and d["k_mad"] == 5.0
    assert d["store"] == str(tmp_path / "store.ccf")
