import math

import numpy as np
import pytest

from calipool.data import validate
from calipool.demo import demo_csv_path, make_demo_dataset
from calipool.errors import DataError
from calipool.io import (
    SimulationReport,
    ingest_csv,
    read_records_csv,
    write_dataset_csv,
    write_records_csv,
    write_simulation_summary_csv,
)
from calipool.methods import ALL_METHODS
from calipool.simulate import ScenarioMain, run_replicates, summarize

HEADER = "study_id,stratum_id,subject_id,is_case,local_w,ref_x,in_calibration_subset"


def write(tmp_path, body, header=HEADER):
    path = tmp_path / "data.csv"
    path.write_text(header + "\n" + body, encoding="utf-8")
    return path


class TestIngest:
    def test_demo_file_parses(self):
        ds = ingest_csv(demo_csv_path())
        assert sum(len(s.strata) for s in ds.studies) == 179
        assert [len(s.calibration_subjects()) for s in ds.studies] == [25, 27, 28]
        assert validate(ds) == []
        assert len(ds.design.covariate_names) == 6

    def test_case_in_calibration_subset_rejected(self, tmp_path):
        body = "s,1,a,1,2.0,2.1,1\ns,1,b,0,1.0,,0\n"
        with pytest.raises(DataError, match="case in calibration subset"):
            ingest_csv(write(tmp_path, body))

    def test_missing_ref_outside_subset_accepted(self, tmp_path):
        body = (
            "s,1,a,1,2.0,,0\ns,1,b,0,1.0,1.1,1\n"
            "s,2,c,1,1.5,,0\ns,2,d,0,0.5,0.6,1\n"
            "s,3,e,1,1.2,,0\ns,3,f,0,0.4,0.5,1\n"
            "s,4,g,1,0.2,,0\ns,4,h,0,0.9,,0\n"
        )
        ds = ingest_csv(write(tmp_path, body))
        assert sum(len(s.strata) for s in ds.studies) == 4

    def test_malformed_number_line_reported(self, tmp_path):
        body = "s,1,a,1,oops,,0\ns,1,b,0,1.0,1.1,1\n"
        with pytest.raises(DataError, match="line 2"):
            ingest_csv(write(tmp_path, body))

    def test_duplicate_key_rejected(self, tmp_path):
        body = "s,1,a,1,2.0,,0\ns,1,a,0,1.0,1.1,1\n"
        with pytest.raises(DataError, match="duplicate"):
            ingest_csv(write(tmp_path, body))

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("study_id,stratum_id\na,b\n", encoding="utf-8")
        with pytest.raises(DataError, match="missing required columns"):
            ingest_csv(path)

    def test_reference_study_inferred(self, tmp_path):
        body = (
            "r,1,a,1,,2.0,0\nr,1,b,0,,1.0,0\n"
            "r,2,c,1,,1.5,0\nr,2,d,0,,0.5,0\n"
        )
        ds = ingest_csv(write(tmp_path, body))
        assert ds.studies[0].lab_kind.value == "reference"


class TestRoundTrips:
    def test_dataset_round_trip(self, tmp_path):
        ds = make_demo_dataset()
        path = tmp_path / "out.csv"
        write_dataset_csv(path, ds)
        back = ingest_csv(path, exposure_scale=ds.design.exposure_scale)
        assert sum(len(s.strata) for s in back.studies) == 179
        for sa, sb in zip(ds.studies, back.studies):
            assert sa.study_id == sb.study_id
            for ra, rb in zip(sa.strata, sb.strata):
                for ma, mb in zip(ra.members, rb.members):
                    assert ma.subject_id == mb.subject_id
                    assert ma.is_case == mb.is_case
                    assert ma.local_w == pytest.approx(mb.local_w)
                    assert (ma.ref_x is None) == (mb.ref_x is None)

    def test_records_round_trip_reproduces_metrics_exactly(self, tmp_path):
        sc = ScenarioMain(beta_x=math.log(1.5), pairs_per_study=50, n_cal=15)
        oc = run_replicates(sc, ALL_METHODS, n_replicates=5, seed=3)
        path = tmp_path / "records.csv"
        write_records_csv(path, oc.records)
        back = read_records_csv(path)
        assert back == list(oc.records)
        again = summarize(back, sc, ALL_METHODS, 5)
        assert again.rows == oc.rows

    def test_summary_csv_written(self, tmp_path):
        sc = ScenarioMain(beta_x=math.log(1.5), pairs_per_study=50, n_cal=15)
        oc = run_replicates(sc, ALL_METHODS, n_replicates=3, seed=3)
        report = SimulationReport(scenario=sc, results=((1.5, oc),))
        path = tmp_path / "summary.csv"
        write_simulation_summary_csv(path, report)
        text = path.read_text()
        assert "mean_percent_bias" in text.splitlines()[0]
        assert len(text.splitlines()) == 1 + 4  # header + 4 methods x 1 coef
