import pytest

from maskscalar.config import build_config


_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "call" or report.failed or report.skipped:
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {verdict}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


TINY = {
    "feature": {"n_mels": 8},
    "model": {"units": 8, "ffn_dim": 16, "conv_kernel": 3, "left_context": 3, "mask_dim": 32, "asr_hidden": 8},
    "schedule": {"lambda_start_step": 2, "lambda_end_step": 6, "alpha_unfreeze_step": 8,
                 "total_steps": 12, "batch_size": 2, "checkpoint_every": 4, "log_every": 1},
    "simulator": {"pool_size": 6, "duration": 0.3, "noise_context": 0.2, "rir_length": 200},
    "eval": {"n_per_bucket": 2},
    "gradcheck": {"frames": 3},
}


def tiny_overrides(**sections):
    out = {k: dict(v) for k, v in TINY.items()}
    for k, v in sections.items():
        out.setdefault(k, {}).update(v)
    return out


@pytest.fixture
def make_tiny():
    """Builder for tiny configs with extra per-section overrides."""
    return lambda **sections: build_config(tiny_overrides(**sections))


@pytest.fixture
def tiny_cfg():
    return build_config(tiny_overrides())


@pytest.fixture(scope="session")
def desk_cfg():
    return build_config()
