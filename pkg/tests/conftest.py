import json

import pytest

STAGES = ["synth", "train-canopy", "predict", "composite", "train-carbon", "predict-carbon",
          "classify", "stats", "eval"]

# a 128 x 128 world with tiny networks: the full pipeline runs in a few seconds
SMALL_CONFIG = {
    "seed": 3,
    "threads": 1,
    "world": {"extent": 128, "tile_size": 32},
    "train": {"iterations": 200, "width": 8, "blocks": 1, "eval_every": 100},
    "carbon": {"epochs": 2, "width": 8},
    "run": {"acquisitions": 3, "composite_k": 2, "predict_tile": 64},
}


def write_config(path, root, **overrides):
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    cfg["root"] = str(root)
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def run_pipeline(cfg_path, main):
    return [main([stage, str(cfg_path)]) for stage in STAGES]


@pytest.fixture
def small_config(tmp_path):
    return write_config(tmp_path / "config.json", tmp_path / "out")


# --- acceptance reporting --------------------------------------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev = _CRITERIA.get(number)
    if prev is None or prev[1] == "PASS":
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
