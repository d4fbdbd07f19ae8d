import datetime as dt

import pytest
import torch

from auxmoblcast.mobility_data import ForecastInstance

torch.set_num_threads(1)

TABLE1_COUNTS = (11, 11, 10, 12, 9, 12, 6, 13, 10, 15, 16, 8, 8, 13, 19)
TABLE1_COUNT_TEXT = "11, 11, 10, 12, 9, 12, 6, 13, 10, 15, 16, 8, 8, 13, 19"
TABLE1_DATES = "From June 17, 2020, Wednesday to July 01, 2020, Wednesday, "
TABLE1_STRINGS = {
    "A": (
        "Place-of-Interest (POI) 385 is a Limited-Service Restaurant. "
        + TABLE1_DATES
        + f"there were {TABLE1_COUNT_TEXT} people visiting POI 385 on each day. "
        "On July 02, 2020, Thursday,",
        "there will be 11 people visiting POI 385.",
    ),
    "B": (
        TABLE1_DATES
        + f"there were {TABLE1_COUNT_TEXT} people visiting POI Limited-Service Restaurant on each day. "
        "On July 02, 2020, Thursday,",
        "there will be 11 people.",
    ),
    "C": (
        TABLE1_DATES
        + f"there were {TABLE1_COUNT_TEXT} people visiting POI on each day. "
        "On July 02, 2020, Thursday,",
        "11",
    ),
}


def make_table1_instance() -> ForecastInstance:
    start = dt.date(2020, 6, 17)
    return ForecastInstance(
        poi_id=385,
        category="Limited-Service Restaurant",
        city="nyc",
        history_dates=tuple(start + dt.timedelta(days=k) for k in range(15)),
        history_counts=TABLE1_COUNTS,
        target_date=dt.date(2020, 7, 2),
        target_count=11,
    )


@pytest.fixture
def table1_instance():
    return make_table1_instance()


# One PASS/FAIL line per acceptance criterion, printed after the run.
ACCEPTANCE_RESULTS: dict = {}


def record_criterion(number: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        digits = "".join(ch for ch in key if ch.isdigit())
        return (int(digits), key)

    for key in sorted(ACCEPTANCE_RESULTS, key=order):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
