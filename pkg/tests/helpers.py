"""Small synthetic builders shared by the test modules."""

import numpy as np

from evfleet_io.dataset import TimeSeriesDataset, make_split


def hourly_stamps(n, start="2021-03-01T00"):
    return np.datetime64(start, "s") + np.arange(n) * np.timedelta64(3600, "s")


def toy_dataset(n=120, seed=0, sizes=None, availability=True):
    rng = np.random.default_rng(seed)
    hours = np.arange(n) % 24
    price = 40 + 10 * np.sin(2 * np.pi * hours / 24) + rng.normal(0, 3, n)
    power = np.clip(60 - 0.8 * price + rng.normal(0, 4, n), 0, None)
    avail = 5 + (hours < 7) * 3 + rng.integers(0, 2, n)
    return TimeSeriesDataset(hourly_stamps(n), price, power,
                             avail.astype(float) if availability else None,
                             split=make_split(n, sizes))


def write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
