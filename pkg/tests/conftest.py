import numpy as np
import pytest

from tarc.model import MultiHeadNet, NetworkConfig


def pytest_report_header(config):
    from tarc import _ext

    return f"tarc resampling backend: {_ext.BACKEND}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return MultiHeadNet(NetworkConfig(input_dim=4, hidden_dims=[3, 3], num_classes=3, ssl_proj_dim=2), seed=7)


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# (criterion, status, title, details, failure) tuples filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def order(record):
        return (int(record[0].rstrip("abc")), record[0])

    for key, status, title, details, failure in sorted(ACCEPTANCE, key=order):
        extra = ", ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {key:<3} {status}  {title} [{extra}]"
        terminalreporter.write_line(line + (f" :: {failure}" if failure else ""))
