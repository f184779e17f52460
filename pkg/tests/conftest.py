import pytest

from facestutter.data import SynthConfig, generate_synthetic, stack, fit_normalization, apply_normalization
from facestutter.models import ModelConfig, build_model
from facestutter.training import TrainConfig, train_model

# criterion number -> (title, outcome, detail)
ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    if rep.when == "setup" and rep.failed:
        ACCEPTANCE[number] = (title, "FAIL", f"setup error: {call.excinfo.value!r}"[:300])
    elif rep.when == "call":
        if rep.passed:
            ACCEPTANCE[number] = (title, "PASS", detail)
        else:
            msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
            ACCEPTANCE[number] = (title, "FAIL", (detail + " | " if detail else "") + msg[:300])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def put(text):
        request.node.acceptance_detail = text
    return put


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_trials=400, seed=11)
    trials, oracle = generate_synthetic(cfg)
    return trials, oracle


@pytest.fixture(scope="session")
def trained_cnn_a(small_synth):
    """A CNN-A trained briefly on a small synthetic set, with its normalized data."""
    trials, _ = small_synth
    X, y = stack(trials)
    Xn = apply_normalization(X, fit_normalization(X))
    model = build_model(ModelConfig(architecture="CNN_A", seed=5))
    cfg = TrainConfig(max_epochs=12, batch_size=64)
    model, hist = train_model(model, Xn[:320], y[:320], Xn[320:], y[320:], cfg, seed=5)
    return model, Xn, y
