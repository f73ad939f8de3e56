import numpy as np
import pytest

from asvmimic.corpus import AudioBuffer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, dur, fs=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(dur * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def resonant_pulses(f0, dur, fs=16000, formants=(500.0, 1500.0, 2500.0), bandwidths=(80.0, 100.0, 120.0),
                    amp=0.5):
    """Impulse train at ``f0`` through a cascade of two-pole resonators."""
    from scipy.signal import lfilter

    n = int(round(dur * fs))
    x = np.zeros(n)
    period = fs / f0
    k = np.arange(0, n, period)
    x[np.round(k).astype(int).clip(0, n - 1)] = 1.0
    for f, bw in zip(formants, bandwidths):
        r = np.exp(-np.pi * bw / fs)
        a = [1.0, -2 * r * np.cos(2 * np.pi * f / fs), r * r]
        x = lfilter([1.0 - r], a, x)
    return amp * x / np.max(np.abs(x))


def buffer(x, fs=16000):
    return AudioBuffer(np.asarray(x, dtype=float), fs)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured values."""
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call" and key != "error":
                continue
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", ""):
                continue
            props = dict(getattr(rep, "user_properties", []))
            num = int(rep.nodeid.split("test_criterion_")[1][:2])
            lines.append((num, "PASS" if rep.passed else "FAIL", props.get("title", ""),
                          props.get("measured", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, title, measured in sorted(set(lines)):
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {title}: {measured}")
