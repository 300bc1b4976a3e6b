import numpy as np
import pytest

from swdecay.data import TrialDataset, read_dataset_csv, write_dataset_csv
from swdecay.exceptions import DatasetError


def small_records(n_clusters=6, n_ind=3, T=4, seed=0):
    rng = np.random.default_rng(seed)
    starts = [2, 2, 3, 3, 4, 4][:n_clusters]
    recs = []
    for c in range(n_clusters):
        for j in range(n_ind):
            for t in range(1, T + 1):
                recs.append((c + 1, j + 1, t, int(t >= starts[c]), float(rng.normal())))
    return recs


def test_happy_path_shapes_and_stats():
    data = TrialDataset.from_records(small_records())
    assert data.n_clusters == 6 and data.n_periods == 4
    assert data.cluster_sizes.tolist() == [3] * 6
    assert data.X[0].tolist() == [0, 1, 1, 1]
    st = data.stats()
    np.testing.assert_allclose(st.ybar[2], data.Y[2].mean(axis=0))
    np.testing.assert_allclose(st.yty[2], data.Y[2].T @ data.Y[2])
    assert st.n_obs == 72


def test_record_order_does_not_matter():
    recs = small_records()
    a = TrialDataset.from_records(recs)
    b = TrialDataset.from_records(list(reversed(recs)))
    for ya, yb in zip(a.Y, b.Y):
        np.testing.assert_array_equal(ya, yb)


def test_duplicate_measurement():
    recs = small_records()
    recs.append(recs[5])
    with pytest.raises(DatasetError, match="duplicate"):
        TrialDataset.from_records(recs)


def test_missing_period_names_individual_and_period():
    recs = [r for r in small_records() if not (r[0] == 2 and r[1] == 3 and r[2] == 3)]
    with pytest.raises(DatasetError, match=r"cluster 2, individual 3 .*period 3"):
        TrialDataset.from_records(recs)


def test_treatment_switching_back_is_rejected():
    recs = [(c, i, t, trt if c != 1 else [0, 1, 0, 1][t - 1], y) for c, i, t, trt, y in small_records()]
    with pytest.raises(DatasetError, match="staggered"):
        TrialDataset.from_records(recs)


def test_conflicting_treatment_within_cluster_period():
    recs = small_records()
    c, i, t, trt, y = recs[1]
    recs[1] = (c, i, t, 1 - trt, y)
    with pytest.raises(DatasetError, match="conflicts"):
        TrialDataset.from_records(recs)


def test_bad_treatment_value():
    recs = small_records()
    c, i, t, _, y = recs[0]
    recs[0] = (c, i, t, 2, y)
    with pytest.raises(DatasetError, match="0 or 1"):
        TrialDataset.from_records(recs)


def test_csv_round_trip(tmp_path):
    data = TrialDataset.from_records(small_records())
    path = tmp_path / "d.csv"
    write_dataset_csv(data, path)
    back = read_dataset_csv(path)
    np.testing.assert_array_equal(back.X, data.X)
    for a, b in zip(back.Y, data.Y):
        np.testing.assert_array_equal(a, b)


def test_csv_error_names_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("cluster,individual,period,treatment,outcome\n1,1,1,0,0.5\n1,1,2,x,0.1\n")
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset_csv(path)


def test_csv_duplicate_names_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("cluster,individual,period,treatment,outcome\n1,1,1,0,0.5\n1,1,2,1,0.1\n1,1,2,1,0.3\n")
    with pytest.raises(DatasetError, match="line 4"):
        read_dataset_csv(path)


def test_csv_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("cluster,individual,period,outcome\n1,1,1,0.5\n")
    with pytest.raises(DatasetError, match="treatment"):
        read_dataset_csv(path)


def test_from_arrays_matches_records():
    data = TrialDataset.from_records(small_records())
    design, y = data.to_arrays()
    again = TrialDataset.from_arrays(design, y)
    for a, b in zip(again.Y, data.Y):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(DatasetError):
        TrialDataset.from_arrays(design[:, :3], y)
    with pytest.raises(DatasetError):
        TrialDataset.from_arrays(design, y[:-1])
