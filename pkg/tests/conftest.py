import numpy as np
import pytest

from titivad.audio_io import AudioClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq_hz, duration_sec, rate=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(duration_sec * rate))) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq_hz * t + phase), rate)


# one line per acceptance criterion, printed in the terminal summary
CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (passed, detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
