import numpy as np
import pytest
from scipy import stats

from survrisk.cohort import (Cohort, apply_eligibility, load_cohort, merge_locations,
                             merge_prefix_counts, split_train_test, write_cohort)
from survrisk.errors import (ConfigError, DataError, DuplicateIdError, EmptyCohortError,
                             RowError, SchemaError)
from survrisk.simulate import (SimulationConfig, parse_kv, read_simulation_config,
                               simulate_cohort)

from support import HEADER, csv_row


# ------------------------------------------------------------------ loading

def test_load_roundtrip(write_csv, tmp_path):
    path = write_csv([csv_row(1, age=45, sex="M", event=1, fu=12.5), csv_row(2, zip5="20002")])
    c = load_cohort(path)
    assert len(c) == 2
    s = c.subject(0)
    assert (s.id, s.age, s.sex, s.event, s.follow_up_days) == ("S1", 45, "M", True, 12.5)
    out = tmp_path / "again.csv"
    write_cohort(c, out)
    c2 = load_cohort(out)
    assert c2.subjects == c.subjects


def test_missing_column_is_schema_error(write_csv):
    header = HEADER.replace(",hdl", ",hdl_mg")
    with pytest.raises(SchemaError) as info:
        load_cohort(write_csv([csv_row(1)], header=header))
    assert info.value.column == "hdl"


def test_schema_mapping_renames_column(write_csv):
    header = HEADER.replace(",hdl", ",hdl_mg")
    c = load_cohort(write_csv([csv_row(1, hdl=61)], header=header), schema={"hdl": "hdl_mg"})
    assert c.hdl[0] == 61


def test_zero_follow_up_reports_line_two(write_csv):
    with pytest.raises(RowError) as info:
        load_cohort(write_csv([csv_row(1, fu=0)]))
    assert info.value.line == 2


def test_bad_zip_names_zip5(write_csv):
    with pytest.raises(RowError, match="zip5") as info:
        load_cohort(write_csv([csv_row(1), csv_row(2, zip5="1234")]))
    assert info.value.line == 3


def test_duplicate_ids_rejected(write_csv):
    with pytest.raises(DuplicateIdError):
        load_cohort(write_csv([csv_row(1), csv_row(1)]))


def test_header_only_is_empty(write_csv):
    with pytest.raises(EmptyCohortError):
        load_cohort(write_csv([]))


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_cohort(tmp_path / "nope.csv")


# -------------------------------------------------------------- eligibility

def test_eligibility_bounds_inclusive(write_csv):
    rows = [
        csv_row(1, age=40, hdl=20, tc=130),
        csv_row(2, age=75, hdl=100, tc=320),
        csv_row(3, age=39),
        csv_row(4, age=76),
        csv_row(5, hdl=19.9),
        csv_row(6, hdl=100.1),
        csv_row(7, tc=129),
        csv_row(8, tc=321),
    ]
    kept = apply_eligibility(load_cohort(write_csv(rows)))
    assert list(kept.ids) == ["S1", "S2"]
    assert apply_eligibility(kept).subjects == kept.subjects


def test_eligibility_all_excluded(write_csv):
    with pytest.raises(EmptyCohortError):
        apply_eligibility(load_cohort(write_csv([csv_row(1, age=30)])))


# ---------------------------------------------------------- location merging

def test_merge_nearest_neighbour():
    m = merge_prefix_counts({"100": 5000, "101": 1000, "200": 3500}, 3000)
    assert m.assignments == {"100": "100", "101": "100", "200": "200"}
    assert m.group_sizes == {"100": 6000, "200": 3500}


def test_merge_collapses_to_one_group():
    m = merge_prefix_counts({"100": 10, "500": 20, "900": 30}, 3000)
    assert m.group_sizes == {"100": 60}


def test_merge_tie_prefers_lower_neighbour():
    m = merge_prefix_counts({"100": 5000, "150": 10, "200": 5000}, 3000)
    assert m.assignments["150"] == "100"


def test_merge_rejects_bad_min_size():
    with pytest.raises(ConfigError):
        merge_prefix_counts({"100": 1}, 0)


def test_merge_locations_from_cohort():
    c = simulate_cohort(SimulationConfig(n_subjects=1000, n_locations=4, seed=3))
    m = merge_locations(c, min_size=300)
    assert sum(m.group_sizes.values()) == 1000
    assert all(v >= 300 for v in m.group_sizes.values())
    assert set(m.assign(c)) == set(m.groups)


# ----------------------------------------------------------------- splitting

def test_split_sizes_and_disjoint():
    c = simulate_cohort(SimulationConfig(n_subjects=10, seed=1))
    tr, te = split_train_test(c, 0.7, seed=4)
    assert (len(tr), len(te)) == (7, 3)
    assert set(tr.ids).isdisjoint(te.ids)
    assert set(tr.ids) | set(te.ids) == set(c.ids)
    tr2, _ = split_train_test(c, 0.7, seed=4)
    assert list(tr2.ids) == list(tr.ids)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_split_rejects_fraction(fraction):
    c = simulate_cohort(SimulationConfig(n_subjects=10, seed=1))
    with pytest.raises(ConfigError):
        split_train_test(c, fraction)


# ---------------------------------------------------------------- simulation

def test_simulation_is_deterministic():
    cfg = SimulationConfig(n_subjects=200, n_locations=5, beta={"age": 0.03},
                           frailty_variance=0.5, censoring_rate=1e-3, seed=99)
    a, b = simulate_cohort(cfg), simulate_cohort(cfg)
    assert a.subjects == b.subjects
    assert simulate_cohort(SimulationConfig(n_subjects=200, seed=100)).subjects != a.subjects


def test_simulated_times_follow_weibull():
    k, lam = 1.5, 1000.0
    c = simulate_cohort(SimulationConfig(n_subjects=5000, weibull_shape=k, weibull_scale=lam,
                                         admin_censor_days=1e12, seed=5))
    assert c.event.all()
    res = stats.kstest(c.time, lambda t: 1 - np.exp(-(t / lam) ** k))
    assert res.pvalue > 0.01


def test_simulated_cohort_is_eligible():
    c = simulate_cohort(SimulationConfig(n_subjects=2000, seed=8))
    assert len(apply_eligibility(c)) == len(c)


@pytest.mark.parametrize("kwargs", [
    {"n_subjects": 0}, {"n_locations": 0}, {"beta": {"weight": 1.0}},
    {"weibull_shape": 0}, {"censoring_rate": -1}, {"frailty_variance": -0.1},
])
def test_simulation_config_validation(kwargs):
    with pytest.raises(ConfigError):
        simulate_cohort(SimulationConfig(**kwargs))


def test_kv_config_file(tmp_path):
    path = tmp_path / "sim.cfg"
    path.write_text("# comment\nn_subjects = 50\nbeta.age = 0.05\nseed=7\n")
    cfg = read_simulation_config(path)
    assert cfg.n_subjects == 50 and cfg.beta == {"age": 0.05} and cfg.seed == 7
    path.write_text("colour = blue\n")
    with pytest.raises(ConfigError):
        read_simulation_config(path)


def test_parse_kv_rejects_malformed():
    with pytest.raises(ConfigError):
        parse_kv("no equals sign here")


def test_cohort_rejects_nonpositive_time():
    c = simulate_cohort(SimulationConfig(n_subjects=3, n_locations=1, seed=1))
    with pytest.raises(DataError):
        Cohort(**{**{n: getattr(c, n) for n in ("ids", "age", "male", "hdl",
                                                "total_cholesterol", "hypertension",
                                                "diabetes", "smoker", "antihypertensive",
                                                "ckd", "ra", "zip5", "event")},
                  "follow_up_days": [1.0, 0.0, 2.0]})
