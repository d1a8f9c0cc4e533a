"""Shared helpers for the test suite."""

from survrisk.cohort import COLUMNS

HEADER = ",".join(COLUMNS)


def csv_row(i, age=50, sex="F", hdl=50, tc=200, flags="0,0,0,0,0,0", zip5="10001",
            fu=100, event=0):
    return f"S{i},{age},{sex},{hdl},{tc},{flags},{zip5},{fu},{event}"
