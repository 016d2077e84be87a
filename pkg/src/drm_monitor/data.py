"""Clustered multi-sample data model, validation, and CSV ingestion.

Data are organized as populations (years/production periods) of
clusters (mills/lots) of real-valued strength observations.  Population
0 acts as the baseline of the density ratio model.  All downstream
estimators consume the flattened representation exposed here; cluster
membership only matters for bootstrap resampling and the clustered
covariance plug-ins.
"""

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DataFormatError

CSV_HEADER = ("population", "cluster", "value")


@dataclass(frozen=True)
class Diagnostic:
    """One validation finding; `code` is stable, `message` is for humans."""

    code: str
    message: str


@dataclass(frozen=True, eq=False)
class PopulationSample:
    """All clusters sampled from one population."""

    label: str
    clusters: tuple

    def __post_init__(self):
        if len(self.clusters) < 1:
            raise DataFormatError(f"population {self.label!r} has no clusters")
        frozen = []
        for c in self.clusters:
            arr = np.asarray(c, dtype=np.float64)
            if arr.ndim != 1 or arr.size < 1:
                raise DataFormatError(f"population {self.label!r} has an empty cluster")
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"population {self.label!r} contains a non-finite value")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "clusters", tuple(frozen))

    @property
    def n_clusters(self):
        return len(self.clusters)

    @cached_property
    def cluster_sizes(self):
        return np.array([c.size for c in self.clusters], dtype=np.int64)

    @cached_property
    def values(self):
        """All observations of this population, flattened in cluster order."""
        v = np.concatenate(self.clusters)
        v.flags.writeable = False
        return v

    @property
    def n_observations(self):
        return int(self.cluster_sizes.sum())


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Ordered populations; index 0 is the baseline population.

    nominal_cluster_size records the design's intended common cluster
    size when there is one; actual sizes may deviate (ragged data)."""

    populations: tuple
    nominal_cluster_size: int = None

    def __post_init__(self):
        pops = tuple(self.populations)
        if not pops:
            raise DataFormatError("dataset has no populations")
        labels = [p.label for p in pops]
        if len(set(labels)) != len(labels):
            raise DataFormatError("duplicate population labels")
        if self.nominal_cluster_size is not None and self.nominal_cluster_size < 1:
            raise DataFormatError("nominal cluster size must be positive")
        object.__setattr__(self, "populations", pops)

    @property
    def m(self):
        """Number of non-baseline populations."""
        return len(self.populations) - 1

    @property
    def labels(self):
        return [p.label for p in self.populations]

    @cached_property
    def n_clusters(self):
        """Cluster counts per population, n_k."""
        return np.array([p.n_clusters for p in self.populations], dtype=np.int64)

    @cached_property
    def n_observations_per_population(self):
        return np.array([p.n_observations for p in self.populations], dtype=np.int64)

    @property
    def n_observations(self):
        """Total observation count across all populations and clusters."""
        return int(self.n_observations_per_population.sum())

    @cached_property
    def rho_clusters(self):
        """Cluster-count proportions n_k / n."""
        n = self.n_clusters
        return n / n.sum()

    @cached_property
    def rho(self):
        """Observation-count proportions; equal to rho_clusters when every
        cluster has the same size.  These are the mixture weights the
        composite EL machinery uses, so the fitted-CDF constraints hold
        exactly even for ragged cluster sizes."""
        n = self.n_observations_per_population
        return n / n.sum()

    @cached_property
    def values(self):
        v = np.concatenate([p.values for p in self.populations])
        v.flags.writeable = False
        return v

    @cached_property
    def pop_index(self):
        """Population index of each flattened observation."""
        idx = np.repeat(np.arange(len(self.populations)), self.n_observations_per_population)
        idx.flags.writeable = False
        return idx

    @cached_property
    def cluster_sizes(self):
        """Size of every cluster, populations concatenated in order."""
        s = np.concatenate([p.cluster_sizes for p in self.populations])
        s.flags.writeable = False
        return s

    @cached_property
    def cluster_of(self):
        """Global cluster index of each flattened observation."""
        c = np.repeat(np.arange(self.cluster_sizes.size), self.cluster_sizes)
        c.flags.writeable = False
        return c

    @cached_property
    def cluster_pop(self):
        """Population index of every global cluster."""
        p = np.repeat(np.arange(len(self.populations)), self.n_clusters)
        p.flags.writeable = False
        return p

    @property
    def mean_cluster_size(self):
        return self.n_observations / int(self.n_clusters.sum())

    def population(self, label):
        for p in self.populations:
            if p.label == label:
                return p
        raise KeyError(f"no population labelled {label!r}")

    def with_baseline(self, label):
        """Reorder so that `label` becomes population 0."""
        pops = list(self.populations)
        idx = self.labels.index(label) if label in self.labels else None
        if idx is None:
            raise DataFormatError(f"baseline population {label!r} not found")
        pops.insert(0, pops.pop(idx))
        return ClusteredDataset(populations=tuple(pops),
                                nominal_cluster_size=self.nominal_cluster_size)


def dataset_from_clusters(labelled_clusters):
    """Build a dataset from {label: [cluster arrays]} preserving order."""
    pops = tuple(PopulationSample(label=lab, clusters=tuple(cls)) for lab, cls in labelled_clusters.items())
    return ClusteredDataset(populations=pops)


def load_csv(path, baseline=None):
    """Load a `population,cluster,value` CSV into a ClusteredDataset.

    Populations are ordered by first appearance (population 0 = first
    label unless `baseline` overrides); clusters group rows by the
    (population, cluster) identifier pair, in first-appearance order.
    Raises DataFormatError with the offending line number on malformed
    rows, non-finite values, a repeated header, or an empty file.
    """
    pop_order = []
    clusters = {}        # (pop, cluster) -> list of floats
    cluster_order = {}   # pop -> [cluster ids in order]
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(f"{path}: line 1: expected header {','.join(CSV_HEADER)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if tuple(h.strip() for h in row) == CSV_HEADER:
                raise DataFormatError(f"{path}: line {lineno}: duplicate header row")
            if len(row) != 3:
                raise DataFormatError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            pop, clu, raw = row[0].strip(), row[1].strip(), row[2].strip()
            if not pop or not clu:
                raise DataFormatError(f"{path}: line {lineno}: empty identifier")
            try:
                val = float(raw)
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: cannot parse value {raw!r}") from None
            if not math.isfinite(val):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value {raw!r}")
            if pop not in cluster_order:
                pop_order.append(pop)
                cluster_order[pop] = []
            if (pop, clu) not in clusters:
                cluster_order[pop].append(clu)
                clusters[(pop, clu)] = []
            clusters[(pop, clu)].append(val)
    if not pop_order:
        raise DataFormatError(f"{path}: no data rows")
    pops = tuple(
        PopulationSample(
            label=pop,
            clusters=tuple(np.array(clusters[(pop, clu)]) for clu in cluster_order[pop]),
        )
        for pop in pop_order
    )
    ds = ClusteredDataset(populations=pops)
    if baseline is not None:
        ds = ds.with_baseline(baseline)
    return ds


def write_csv(ds, path):
    """Write the dataset back out; values round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for p in ds.populations:
            for j, cluster in enumerate(p.clusters):
                for v in cluster:
                    writer.writerow([p.label, str(j + 1), repr(float(v))])


def validate(ds, basis):
    """Return diagnostics for (dataset, basis) without raising.

    Flags positivity violations for log-type bases, populations too
    small to bootstrap, and ragged cluster sizes (the limiting-theory
    covariance formulas assume one common cluster size).
    """
    out = []
    if basis.requires_positive:
        for p in ds.populations:
            bad = int(np.sum(p.values <= 0.0))
            if bad:
                out.append(
                    Diagnostic(
                        "positivity",
                        f"population {p.label!r}: {bad} value(s) <= 0 but basis "
                        f"{basis.name!r} takes logarithms",
                    )
                )
    for p in ds.populations:
        if p.n_clusters < 2:
            out.append(
                Diagnostic(
                    "singleton-population",
                    f"population {p.label!r} has a single cluster; bootstrap "
                    "resampling will degenerate",
                )
            )
    sizes = np.unique(ds.cluster_sizes)
    if sizes.size > 1:
        out.append(
            Diagnostic(
                "ragged-clusters",
                f"cluster sizes vary ({sizes.min()}..{sizes.max()}); asymptotic "
                f"covariance plug-ins use the mean size d={ds.mean_cluster_size:.3g}",
            )
        )
    return out
