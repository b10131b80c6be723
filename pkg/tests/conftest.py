import numpy as np
import pytest

from owtc import classifier, nn, packets


@pytest.fixture(scope="session")
def trained():
    """(model, train, held-out known, unknown) on four known and two unknown synthetic apps."""
    profiles = packets.default_profiles(6)
    train = packets.synth_generate(profiles[:4], 150, seed=1)
    held = packets.synth_generate(profiles[:4], 50, seed=2)
    unknown = packets.synth_generate(profiles, [1, 1, 1, 1, 60, 60], seed=3)
    unknown = unknown.subset(np.flatnonzero(unknown.labels >= 4))
    model = classifier.train_classifier(classifier.ArchitectureSpec("mlp"), train, nn.TrainConfig(epochs=8, seed=4))
    return model, train, held, unknown


@pytest.fixture(scope="session")
def episode(tmp_path_factory):
    """One default open-world episode (seed 0): (report, run directory)."""
    from owtc.scenario import ScenarioConfig, run_scenario

    out = tmp_path_factory.mktemp("episode")
    report = run_scenario(ScenarioConfig(seed=0, bench_rounds=50, bench_per_round=500), out, bench=True)
    return report, out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
