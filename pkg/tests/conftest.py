"""Shared fixtures: tiny datasets, random graph samples, access tracing."""

import numpy as np

from mobicast.dataio import CountryDataset, SyntheticConfig, generate_synthetic
from mobicast.graphs import GraphSample, normalize_incoming
from mobicast.rng import Rng


def make_ramp_dataset(n=4, days=30, country="X", seed=0):
    """Deterministic dataset with linearly growing cases and random mobility."""
    rng = Rng(seed)
    regions = [f"r{i}" for i in range(n)]
    dates = [f"2020-04-{d + 1:02d}" if d < 30 else f"2020-05-{d - 29:02d}"
             for d in range(days)]
    cases = np.outer(np.arange(1, n + 1), np.arange(1, days + 1)).astype(float)
    mobility = [rng.uniform(0.0, 10.0, (n, n)) for _ in range(days)]
    return CountryDataset(country, regions, dates, cases, mobility)


def small_synthetic(seed=0, n=5, days=40, countries=1, jitter=True):
    cfg = SyntheticConfig(n_regions=n, n_days=days, n_countries=countries,
                          noise_seed=seed, jitter=jitter)
    data = generate_synthetic(cfg)
    return data[0] if countries == 1 else data


def random_sample(rng, n=4, d=7, steps=1, horizon=1, with_target=True):
    """Random GraphSample with row-normalized mobility and nonnegative features."""
    pairs = []
    for _ in range(steps):
        a = normalize_incoming(rng.uniform(0.0, 5.0, (n, n)))
        x = rng.uniform(0.0, 20.0, (n, d))
        pairs.append((a, x))
    target = rng.uniform(0.0, 30.0, n) if with_target else None
    return GraphSample(anchor=d + steps - 1, horizon=horizon,
                       graphs=tuple(pairs), target=target)


class TracingDataset:
    """CountryDataset proxy recording which days each accessor touched."""

    def __init__(self, inner: CountryDataset):
        self._inner = inner
        self.case_days_read = set()
        self.mobility_days_read = set()

    def __getattr__(self, name):
        return getattr(self._inner, name)

    @property
    def n(self):
        return self._inner.n

    @property
    def t_total(self):
        return self._inner.t_total

    def cases_on(self, day):
        self.case_days_read.add(day)
        return self._inner.cases_on(day)

    def case_window(self, day, d):
        self.case_days_read.update(range(day - d + 1, day + 1))
        return self._inner.case_window(day, d)

    def mobility_on(self, day):
        self.mobility_days_read.add(day)
        return self._inner.mobility_on(day)
