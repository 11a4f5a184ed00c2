import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structgp.data import (DataError, ObservationSet, TaskCatalog, TransformState,
                           derive_pseudo_tasks, ingest_csv, make_batches,
                           normal_score_transform, pad_by_task, write_csv)


def _write(tmp_path, text, name="obs.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _obs(subject, task, time, value, k=None, r=None):
    subject = np.asarray(subject)
    task = np.asarray(task)
    return ObservationSet(subject, task, np.asarray(time, float), np.asarray(value, float),
                          k=k or int(task.max()) + 1, r=r or int(subject.max()) + 1)


class TestIngest:
    def test_three_rows_two_subjects(self, tmp_path):
        p = _write(tmp_path, "subject_id,task_id,time,value\n0,0,0.5,1.0\n0,1,1.0,2.0\n1,0,0.2,3.0\n")
        obs = ingest_csv(p)
        assert obs.r == 2 and len(obs) == 3 and obs.k == 2

    def test_string_subjects_densified_by_first_appearance(self, tmp_path):
        p = _write(tmp_path, "subject_id,task_id,time,value\nb,NE,1.0,0.5\na,NE,2.0,0.1\nb,MAP,1.0,0.3\n")
        obs = ingest_csv(p)
        assert obs.subject_labels == ("b", "a")
        np.testing.assert_array_equal(obs.subject, [0, 1, 0])
        assert obs.catalog.names == ("NE", "MAP")
        np.testing.assert_array_equal(obs.task, [0, 0, 1])

    def test_duplicate_triple_names_line(self, tmp_path):
        p = _write(tmp_path, "subject_id,task_id,time,value\n0,0,1.5,1\n0,1,1.5,2\n0,0,1.5,3\n")
        with pytest.raises(DataError, match=r"obs\.csv:4:"):
            ingest_csv(p)

    def test_malformed_row_names_line(self, tmp_path):
        p = _write(tmp_path, "subject_id,task_id,time,value\n0,0,1.5,1\n0,0,abc,2\n")
        with pytest.raises(DataError, match=r"obs\.csv:3:"):
            ingest_csv(p)

    def test_non_finite_value_rejected(self, tmp_path):
        p = _write(tmp_path, "subject_id,task_id,time,value\n0,0,1.5,nan\n")
        with pytest.raises(DataError):
            ingest_csv(p)

    def test_missing_column(self, tmp_path):
        p = _write(tmp_path, "subject_id,time,value\n0,1.5,1\n")
        with pytest.raises(DataError):
            ingest_csv(p)

    def test_roundtrip_is_identical(self, tmp_path, rng):
        n = 40
        obs = _obs(rng.integers(0, 5, n), rng.integers(0, 3, n), rng.uniform(0, 10, n),
                   rng.normal(size=n), k=3, r=5)
        write_csv(obs, tmp_path / "a.csv")
        back = ingest_csv(tmp_path / "a.csv")
        write_csv(back, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        np.testing.assert_array_equal(back.time, obs.time)
        np.testing.assert_array_equal(back.value, obs.value)

    def test_observation_set_rejects_bad_task(self):
        with pytest.raises(DataError):
            _obs([0], [3], [0.0], [1.0], k=2, r=1)


class TestNormalScore:
    def test_median_maps_to_zero(self):
        obs = _obs([0, 0, 0], [0, 0, 0], [1, 2, 3], [1.0, 2.0, 3.0])
        out, _ = normal_score_transform(obs)
        assert out.value[1] == pytest.approx(0.0, abs=1e-15)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, values):
        n = len(values)
        obs = _obs(np.zeros(n, int), np.zeros(n, int), np.arange(n), values)
        out, _ = normal_score_transform(obs)
        order = np.argsort(values)
        assert np.all(np.diff(out.value[order]) > 0)

    def test_roundtrip_on_fit_data(self, rng):
        v = rng.gamma(2.0, size=300)
        obs = _obs(np.arange(300) % 7, np.zeros(300, int), rng.uniform(0, 1, 300), v)
        out, state = normal_score_transform(obs)
        np.testing.assert_allclose(state.inverse(obs.task, out.value), v, atol=1e-9)

    def test_moments_on_large_fit_set(self, rng):
        v = rng.lognormal(size=500)
        obs = _obs(np.arange(500) % 11, np.zeros(500, int), np.arange(500) * 0.01, v)
        out, _ = normal_score_transform(obs)
        assert abs(out.value.mean()) < 0.05
        assert abs(out.value.var() - 1) < 0.1

    def test_out_of_range_clamps(self):
        obs = _obs([0, 0, 0], [0, 0, 0], [1, 2, 3], [1.0, 2.0, 3.0])
        _, state = normal_score_transform(obs)
        z = state.forward(np.array([0, 0]), np.array([-100.0, 100.0]))
        assert np.all(np.isfinite(z))
        assert z[0] == state.forward(np.array([0]), np.array([1.0]))[0]

    def test_task_without_fit_data_named(self):
        obs = _obs([0, 1], [0, 1], [1, 2], [1.0, 2.0])
        with pytest.raises(DataError, match="'1'"):
            normal_score_transform(obs, fit_on=[0])

    def test_state_json_roundtrip(self, rng):
        obs = _obs(np.zeros(20, int), np.zeros(20, int), np.arange(20), rng.normal(size=20))
        _, state = normal_score_transform(obs)
        back = TransformState.from_json(state.to_json())
        z = np.linspace(-3, 3, 9)
        np.testing.assert_array_equal(back.inverse(np.zeros(9, int), z),
                                      state.inverse(np.zeros(9, int), z))


class TestPseudoTasks:
    def setup_method(self):
        self.obs = _obs([0, 0, 0, 1, 1], [0, 1, 0, 0, 1], [0.0, 1.0, 2.0, 0.5, 0.5],
                        [1.0, 2.0, 3.0, 4.0, 5.0], k=2, r=2)

    def test_zero_lag_copies_source(self):
        cat = self.obs.catalog.with_derived([(0, "lag", 0.0)])
        out = derive_pseudo_tasks(self.obs, cat)
        src, new = out.task == 0, out.task == 2
        np.testing.assert_array_equal(out.time[new], out.time[src])
        np.testing.assert_array_equal(out.value[new], out.value[src])

    def test_lag_shifts_forward(self):
        cat = self.obs.catalog.with_derived([(0, "lag", 2.0)])
        out = derive_pseudo_tasks(self.obs, cat)
        new = out.task == 2
        assert (2.0 + 2.0, 3.0) in list(zip(out.time[new], out.value[new]))

    def test_constant_task_one_per_distinct_time(self):
        times = [0.0, 1.0, 2.0, 3.0, 4.0, 4.0]
        obs = _obs([0] * 6, [0, 0, 0, 0, 0, 1], times, np.arange(6.0), k=2, r=1)
        out = derive_pseudo_tasks(obs, obs.catalog.with_derived([(0, "constant", 0.0)]))
        const = out.task == 2
        assert const.sum() == 5
        np.testing.assert_array_equal(out.value[const], 1.0)

    def test_raw_records_unchanged(self):
        cat = self.obs.catalog.with_derived([(1, "lag", 1.0), (0, "constant", 0.0)])
        out = derive_pseudo_tasks(self.obs, cat)
        raw = out.task < 2
        np.testing.assert_array_equal(out.value[raw], self.obs.value)
        np.testing.assert_array_equal(out.time[raw], self.obs.time)

    def test_missing_source_rejected(self):
        with pytest.raises(DataError):
            derive_pseudo_tasks(self.obs, self.obs.catalog.with_derived([(5, "lag", 1.0)]))


class TestBatches:
    def _obs(self, r):
        return _obs(np.arange(r), np.zeros(r, int), np.zeros(r), np.zeros(r), k=1, r=r)

    def test_even_split(self):
        assert [len(b.subject_ids) for b in make_batches(self._obs(4), 2, seed=0)] == [2, 2]

    def test_remainder(self):
        assert [len(b.subject_ids) for b in make_batches(self._obs(5), 2, seed=0)] == [2, 2, 1]

    def test_deterministic(self):
        a = make_batches(self._obs(9), 4, seed=3)
        b = make_batches(self._obs(9), 4, seed=3)
        assert [x.subject_ids for x in a] == [x.subject_ids for x in b]

    @given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_partition(self, r, bs, seed):
        batches = make_batches(self._obs(r), bs, seed=seed)
        ids = sorted(i for b in batches for i in b.subject_ids)
        assert ids == list(range(r))
        idx = np.sort(np.concatenate([b.index for b in batches]))
        np.testing.assert_array_equal(idx, np.arange(r))


def test_padding_layout(rng):
    obs = _obs([0, 0, 0, 1], [1, 0, 1, 0], [3.0, 1.0, 2.0, 5.0], [1, 2, 3, 4], k=2, r=2)
    p = pad_by_task(obs)
    assert p.shape == (2, 2, 2)
    np.testing.assert_array_equal(p.times[0, 1], [2.0, 3.0])
    assert p.mask.sum() == 4
    assert p.index[1, 1, 0] == -1
