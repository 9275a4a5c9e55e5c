from __future__ import annotations

import io

import numpy as np
import pytest

from staylength.ingest import load_bookings
from staylength.simgen import BookingSimSpec, simulate_bookings

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_table():
    return simulate_bookings(BookingSimSpec(intensity=4000, seed=11))


@pytest.fixture
def tiny_csv():
    return io.StringIO(
        "nights,weight,created_date\n"
        "3,5,2019-07-01\n"
        "3,2,2019-07-01\n"
        "181,1,2022-01-01\n"
        "0,4,2022-01-01\n"
        "2,3,2020-03-14\n"
        "30,1,2020-03-15\n"
        "5,2,2021-06-15\n"
    )


@pytest.fixture
def tiny_table(tiny_csv):
    return load_bookings(tiny_csv)
