import numpy as np
import pytest

from mist.dataio import SynthSpec, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Small dataset with raw clips, shared by the slower module tests."""
    spec = SynthSpec(
        num_normal=6, num_abnormal=6, num_test_normal=3, num_test_abnormal=3,
        clips_min=12, clips_max=20, feature_dim=16, anomaly_shift=2.0,
        anomaly_min_len=3, anomaly_max_len=6, frames_per_clip=8, raw_size=16,
    )
    return synth_dataset(spec, tmp_path_factory.mktemp("tiny"), seed=7)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
