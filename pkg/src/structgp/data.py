"""Observation containers, CSV ingestion and preprocessing.

Observations are stored as flat, immutable column arrays: one entry per
``(subject, task, time, value)`` record.  No grid resampling or imputation
is performed anywhere; every model in the package consumes the irregular
records directly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "DataError",
    "TaskCatalog",
    "ObservationSet",
    "SubjectBatch",
    "PaddedSubjects",
    "TransformState",
    "ingest_csv",
    "write_csv",
    "normal_score_transform",
    "derive_pseudo_tasks",
    "make_batches",
    "pad_by_task",
]

CSV_HEADER = ("subject_id", "task_id", "time", "value")


class DataError(ValueError):
    """Raised for malformed, inconsistent or duplicated observation data."""


@dataclass(frozen=True)
class TaskCatalog:
    """Task labels plus the bookkeeping for derived pseudo-tasks.

    ``derived_tasks`` holds ``(source, kind, lag)`` triples with ``kind`` in
    ``{"constant", "lag"}``.  Derived task ids are ``n_raw, n_raw + 1, ...``
    in the order listed.  ``source`` is ignored for constant tasks.
    """

    names: tuple[str, ...]
    derived_tasks: tuple[tuple[int, str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        derived = []
        for src, kind, lag in self.derived_tasks:
            if kind not in ("constant", "lag"):
                raise DataError(f"unknown derived task kind {kind!r}")
            derived.append((int(src), str(kind), float(lag)))
        object.__setattr__(self, "derived_tasks", tuple(derived))

    @property
    def n_raw(self) -> int:
        return len(self.names)

    @property
    def k(self) -> int:
        return len(self.names) + len(self.derived_tasks)

    @property
    def all_names(self) -> tuple[str, ...]:
        extra = []
        for src, kind, lag in self.derived_tasks:
            if kind == "constant":
                extra.append("1")
            else:
                extra.append(f"{self.names[src]}-{lag:g}")
        return self.names + tuple(extra)

    def is_derived(self, task: int) -> bool:
        return task >= self.n_raw

    def index(self, name: str) -> int:
        try:
            return self.all_names.index(str(name))
        except ValueError:
            raise DataError(f"unknown task {name!r}") from None

    def with_derived(self, derived: Iterable[tuple[int, str, float]]) -> "TaskCatalog":
        return TaskCatalog(self.names, tuple(self.derived_tasks) + tuple(derived))

    def to_dict(self) -> dict:
        return {"names": list(self.names),
                "derived_tasks": [list(d) for d in self.derived_tasks]}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskCatalog":
        return cls(tuple(d["names"]), tuple(tuple(x) for x in d.get("derived_tasks", [])))

    @classmethod
    def default(cls, k: int) -> "TaskCatalog":
        return cls(tuple(str(i) for i in range(k)))


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Immutable collection of irregularly sampled multi-subject observations.

    Attributes
    ----------
    subject, task : ndarray of int
        Dense subject ids in ``[0, r)`` and task ids in ``[0, k)``.
    time, value : ndarray of float
    k, r : int
        Task and subject counts.  Subjects or tasks may have no records.
    catalog : TaskCatalog
    subject_labels : tuple of str
        Original subject identifiers, indexed by dense id.
    """

    subject: np.ndarray
    task: np.ndarray
    time: np.ndarray
    value: np.ndarray
    k: int
    r: int
    catalog: TaskCatalog = None
    subject_labels: tuple = None

    def __post_init__(self):
        subject = np.ascontiguousarray(self.subject, dtype=np.int64)
        task = np.ascontiguousarray(self.task, dtype=np.int64)
        time = np.ascontiguousarray(self.time, dtype=np.float64)
        value = np.ascontiguousarray(self.value, dtype=np.float64)
        if not (subject.shape == task.shape == time.shape == value.shape) or subject.ndim != 1:
            raise DataError("record columns must be 1-d arrays of equal length")
        if subject.size:
            if subject.min() < 0 or subject.max() >= self.r:
                raise DataError("subject id out of range [0, r)")
            if task.min() < 0 or task.max() >= self.k:
                raise DataError("task id out of range [0, k)")
        if not np.all(np.isfinite(time)):
            raise DataError("non-finite observation time")
        if not np.all(np.isfinite(value)):
            raise DataError("non-finite observation value")
        dup = _first_duplicate(subject, task, time)
        if dup is not None:
            raise DataError(f"duplicate (subject, task, time) record at position {dup}")
        for arr in (subject, task, time, value):
            arr.setflags(write=False)
        object.__setattr__(self, "subject", subject)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "value", value)
        if self.catalog is None:
            object.__setattr__(self, "catalog", TaskCatalog.default(self.k))
        elif self.catalog.k != self.k:
            raise DataError(f"catalog describes {self.catalog.k} tasks, data has k={self.k}")
        if self.subject_labels is None:
            object.__setattr__(self, "subject_labels", tuple(str(i) for i in range(self.r)))
        else:
            labels = tuple(str(s) for s in self.subject_labels)
            if len(labels) != self.r:
                raise DataError("subject_labels must have length r")
            object.__setattr__(self, "subject_labels", labels)

    def __len__(self):
        return self.subject.size

    def __eq__(self, other):
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (self.k == other.k and self.r == other.r
                and self.catalog == other.catalog
                and self.subject_labels == other.subject_labels
                and np.array_equal(self.subject, other.subject)
                and np.array_equal(self.task, other.task)
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.value, other.value))

    def records(self):
        """Iterate over ``(subject, task, time, value)`` tuples."""
        return zip(self.subject.tolist(), self.task.tolist(),
                   self.time.tolist(), self.value.tolist())

    def subject_index(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.subject == i)

    def select(self, mask: np.ndarray) -> "ObservationSet":
        """Subset of records, keeping ids, ``k`` and ``r`` unchanged."""
        mask = np.asarray(mask)
        return ObservationSet(self.subject[mask], self.task[mask], self.time[mask],
                              self.value[mask], self.k, self.r, self.catalog,
                              self.subject_labels)

    def select_subjects(self, subjects: Sequence[int], reindex: bool = False) -> "ObservationSet":
        """Records of the given subjects, optionally densified to ``0..len-1``."""
        subjects = np.asarray(list(subjects), dtype=np.int64)
        sub = self.select(np.isin(self.subject, subjects))
        if not reindex:
            return sub
        remap = np.full(self.r, -1, dtype=np.int64)
        remap[subjects] = np.arange(subjects.size)
        labels = tuple(self.subject_labels[s] for s in subjects)
        return ObservationSet(remap[sub.subject], sub.task, sub.time, sub.value,
                              self.k, int(subjects.size), self.catalog, labels)

    def with_values(self, value: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.subject, self.task, self.time, value, self.k,
                              self.r, self.catalog, self.subject_labels)

    def sorted(self) -> "ObservationSet":
        order = np.lexsort((self.time, self.task, self.subject))
        return self.select(order)


def _first_duplicate(subject, task, time):
    if subject.size < 2:
        return None
    order = np.lexsort((time, task, subject))
    s, t, x = subject[order], task[order], time[order]
    same = (s[1:] == s[:-1]) & (t[1:] == t[:-1]) & (x[1:] == x[:-1])
    if not same.any():
        return None
    j = int(np.flatnonzero(same)[0])
    return int(max(order[j], order[j + 1]))


@dataclass(frozen=True)
class SubjectBatch:
    """A group of whole subjects and the record indices belonging to them."""

    subject_ids: tuple[int, ...]
    index: np.ndarray = field(repr=False)


def ingest_csv(path, catalog: TaskCatalog | None = None,
               schema: Sequence[str] = CSV_HEADER) -> ObservationSet:
    """Read a long-format CSV of observations.

    Parameters
    ----------
    path : str or path-like
    catalog : TaskCatalog, optional
        When given, task labels are mapped through it.  Otherwise integer
        labels are used as ids directly and any other labels are densified
        in order of first appearance.
    schema : sequence of str
        Column names for subject, task, time and value, in that order.

    Raises
    ------
    DataError
        On a malformed row (with its line number), a duplicated
        ``(subject, task, time)`` triple, or a non-finite time or value.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return _ingest(fh, catalog, schema, name=os.fspath(path))


def _ingest(fh, catalog, schema, name="<csv>"):
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{name}: empty file") from None
    try:
        cols = [header.index(c) for c in schema]
    except ValueError:
        raise DataError(f"{name}: header must contain columns {list(schema)}, got {header}") from None

    subj_labels, subj_ids = [], {}
    task_raw, subj, times, vals, lines = [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"{name}:{lineno}: expected {len(header)} fields, got {len(row)}")
        s, tk, t, v = (row[c].strip() for c in cols)
        try:
            t = float(t)
            v = float(v)
        except ValueError:
            raise DataError(f"{name}:{lineno}: cannot parse time/value from {row!r}") from None
        if not math.isfinite(t):
            raise DataError(f"{name}:{lineno}: non-finite time")
        if not math.isfinite(v):
            raise DataError(f"{name}:{lineno}: non-finite value")
        if s not in subj_ids:
            subj_ids[s] = len(subj_labels)
            subj_labels.append(s)
        subj.append(subj_ids[s])
        task_raw.append(tk)
        times.append(t)
        vals.append(v)
        lines.append(lineno)

    if catalog is not None:
        task = [catalog.index(x) if x in catalog.all_names else _as_int(x, catalog, name, ln)
                for x, ln in zip(task_raw, lines)]
    elif all(_is_int(x) for x in task_raw):
        task = [int(x) for x in task_raw]
        if any(x < 0 for x in task):
            raise DataError(f"{name}: negative task id")
        catalog = TaskCatalog.default(max(task) + 1 if task else 0)
    else:
        names = list(dict.fromkeys(task_raw))
        catalog = TaskCatalog(tuple(names))
        lookup = {n: i for i, n in enumerate(names)}
        task = [lookup[x] for x in task_raw]

    seen = {}
    for j, key in enumerate(zip(subj, task, times)):
        if key in seen:
            raise DataError(f"{name}:{lines[j]}: duplicate (subject, task, time) "
                            f"= ({subj_labels[key[0]]}, {task_raw[j]}, {key[2]!r}), "
                            f"first seen on line {seen[key]}")
        seen[key] = lines[j]

    return ObservationSet(np.array(subj, dtype=np.int64), np.array(task, dtype=np.int64),
                          np.array(times, dtype=float), np.array(vals, dtype=float),
                          catalog.k, len(subj_labels), catalog, tuple(subj_labels))


def _is_int(x):
    try:
        int(x)
    except ValueError:
        return False
    return True


def _as_int(x, catalog, name, lineno):
    if _is_int(x) and 0 <= int(x) < catalog.k:
        return int(x)
    raise DataError(f"{name}:{lineno}: unknown task {x!r}")


def write_csv(obs: ObservationSet, path, task_names: bool = False) -> None:
    """Write observations in the canonical long format (``repr`` floats)."""
    names = obs.catalog.all_names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s, t, x, v in obs.records():
        w.writerow((obs.subject_labels[s], names[t] if task_names else t, repr(x), repr(v)))
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text):
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Normal-score (quantile) transform
# ---------------------------------------------------------------------------

@dataclass
class TransformState:
    """Fitted per-task quantile tables mapping raw values to normal scores.

    ``quantiles[j]`` is a pair ``(x, z)`` of increasing arrays; forward and
    inverse maps interpolate linearly between the knots and clamp outside
    them.  Tasks without a table pass through unchanged.
    """

    quantiles: dict[int, tuple[np.ndarray, np.ndarray]]

    def forward(self, task: np.ndarray, value: np.ndarray) -> np.ndarray:
        out = np.array(value, dtype=float, copy=True)
        task = np.asarray(task)
        for j, (x, z) in self.quantiles.items():
            sel = task == j
            if sel.any():
                out[sel] = np.interp(out[sel], x, z)
        return out

    def inverse(self, task: np.ndarray, score: np.ndarray) -> np.ndarray:
        out = np.array(score, dtype=float, copy=True)
        task = np.asarray(task)
        for j, (x, z) in self.quantiles.items():
            sel = task == j
            if sel.any():
                out[sel] = np.interp(out[sel], z, x)
        return out

    def scale_at(self, task: np.ndarray, score: np.ndarray) -> np.ndarray:
        """Local slope dx/dz of the inverse map (for back-transforming spreads)."""
        out = np.ones(len(score))
        task = np.asarray(task)
        for j, (x, z) in self.quantiles.items():
            sel = task == j
            if sel.any() and len(x) > 1:
                slope = np.diff(x) / np.diff(z)
                idx = np.clip(np.searchsorted(z, score[sel]) - 1, 0, len(slope) - 1)
                out[sel] = slope[idx]
        return out

    def to_json(self) -> str:
        return json.dumps({"version": 1, "quantiles": {
            str(j): {"x": x.tolist(), "z": z.tolist()} for j, (x, z) in self.quantiles.items()}})

    @classmethod
    def from_json(cls, text: str) -> "TransformState":
        d = json.loads(text)
        return cls({int(j): (np.asarray(q["x"], dtype=float), np.asarray(q["z"], dtype=float))
                    for j, q in d["quantiles"].items()})


def _quantile_table(values):
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    p = (np.arange(1, n + 1) - 0.5) / n
    z = ndtri(p)
    # ties share the mean score so the knots stay strictly increasing
    ux, inv = np.unique(x, return_inverse=True)
    uz = np.bincount(inv, weights=z) / np.bincount(inv)
    return ux, uz


def normal_score_transform(obs: ObservationSet, fit_on: Iterable[int] | None = None,
                           tasks: Iterable[int] | None = None):
    """Map each task's values to standard-normal scores by rank.

    The table is fitted on the records of the ``fit_on`` subjects (all when
    omitted) with plotting positions ``(rank - 0.5) / n``.

    Returns
    -------
    ObservationSet, TransformState
    """
    if fit_on is None:
        fit_mask = np.ones(len(obs), dtype=bool)
    else:
        fit_mask = np.isin(obs.subject, np.asarray(list(fit_on), dtype=np.int64))
    if tasks is None:
        tasks = range(obs.catalog.n_raw)
    quantiles = {}
    for j in tasks:
        vals = obs.value[fit_mask & (obs.task == j)]
        if vals.size == 0:
            raise DataError(f"task {obs.catalog.all_names[j]!r} has no observations in the fit subset")
        quantiles[int(j)] = _quantile_table(vals)
    state = TransformState(quantiles)
    return obs.with_values(state.forward(obs.task, obs.value)), state


# ---------------------------------------------------------------------------
# Pseudo-tasks and batching
# ---------------------------------------------------------------------------

def derive_pseudo_tasks(obs: ObservationSet, catalog: TaskCatalog) -> ObservationSet:
    """Append constant and lagged pseudo-task records.

    ``catalog`` must extend ``obs.catalog`` with derived tasks.  A constant
    task emits 1.0 at every distinct observation time of each subject; a
    lag task copies its source forward in time by ``lag``.
    """
    if catalog.names != obs.catalog.names[:catalog.n_raw] or obs.k != catalog.n_raw:
        raise DataError("catalog raw tasks do not match the observation set")
    parts = [(obs.subject, obs.task, obs.time, obs.value)]
    for d, (src, kind, lag) in enumerate(catalog.derived_tasks):
        tid = catalog.n_raw + d
        if kind == "constant":
            st = np.unique(np.stack([obs.subject, obs.time], axis=1), axis=0)
            s = st[:, 0].astype(np.int64)
            parts.append((s, np.full(s.size, tid), st[:, 1], np.ones(s.size)))
        else:
            if lag < 0:
                raise DataError("lag must be non-negative")
            if not 0 <= src < catalog.n_raw:
                raise DataError(f"lag source task {src} does not exist")
            sel = obs.task == src
            parts.append((obs.subject[sel], np.full(int(sel.sum()), tid),
                          obs.time[sel] + lag, obs.value[sel]))
    cols = [np.concatenate(c) for c in zip(*parts)]
    return ObservationSet(*cols, k=catalog.k, r=obs.r, catalog=catalog,
                          subject_labels=obs.subject_labels)


def make_batches(obs: ObservationSet, batch_size_subjects: int, seed: int = 0,
                 subjects: Sequence[int] | None = None) -> list[SubjectBatch]:
    """Partition subjects into shuffled batches of whole subjects."""
    if batch_size_subjects < 1:
        raise ValueError("batch_size_subjects must be >= 1")
    ids = np.arange(obs.r) if subjects is None else np.asarray(subjects, dtype=np.int64)
    ids = np.random.default_rng(seed).permutation(ids)
    batches = []
    for start in range(0, ids.size, batch_size_subjects):
        chunk = np.sort(ids[start:start + batch_size_subjects])
        batches.append(SubjectBatch(tuple(int(i) for i in chunk),
                                    np.flatnonzero(np.isin(obs.subject, chunk))))
    return batches


@dataclass
class PaddedSubjects:
    """Per-subject records laid out as ``(B, k, T)`` arrays with a mask.

    Record ``(b, v, j)`` is the ``j``-th observation of task ``v`` for
    subject ``subjects[b]``; ``index`` maps it back to the record position
    in the source ObservationSet (-1 for padding).
    """

    subjects: np.ndarray
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    index: np.ndarray

    @property
    def shape(self):
        return self.times.shape

    def take(self, rows) -> "PaddedSubjects":
        rows = np.asarray(rows)
        return PaddedSubjects(self.subjects[rows], self.times[rows], self.values[rows],
                              self.mask[rows], self.index[rows])


def pad_by_task(obs: ObservationSet, subjects: Sequence[int] | None = None,
                min_len: int = 1) -> PaddedSubjects:
    """Lay out subject records in the ``(B, k, T)`` padded form."""
    subjects = np.arange(obs.r) if subjects is None else np.asarray(subjects, dtype=np.int64)
    pos = {int(s): b for b, s in enumerate(subjects)}
    sel = np.flatnonzero(np.isin(obs.subject, subjects))
    order = sel[np.lexsort((obs.time[sel], obs.task[sel], obs.subject[sel]))]
    counts = np.zeros((subjects.size, obs.k), dtype=np.int64)
    for i in order:
        counts[pos[int(obs.subject[i])], obs.task[i]] += 1
    T = max(int(counts.max()) if counts.size else 0, min_len)
    shape = (subjects.size, obs.k, T)
    times = np.zeros(shape)
    values = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    index = np.full(shape, -1, dtype=np.int64)
    fill = np.zeros((subjects.size, obs.k), dtype=np.int64)
    for i in order:
        b, v = pos[int(obs.subject[i])], obs.task[i]
        j = fill[b, v]
        fill[b, v] += 1
        times[b, v, j] = obs.time[i]
        values[b, v, j] = obs.value[i]
        mask[b, v, j] = True
        index[b, v, j] = i
    return PaddedSubjects(subjects, times, values, mask, index)
