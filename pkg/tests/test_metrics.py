import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st_h
from hypothesis.extra.numpy import arrays

from selftaught import student as st
from selftaught.metrics import IterationReport, dsc, evaluate, read_report, write_jsonl, write_report

ARCH = st.StudentArch(input_size=16, channels=(2, 2, 2))

masks = st_h.tuples(st_h.integers(1, 10), st_h.integers(1, 10)).flatmap(
    lambda shape: st_h.tuples(arrays(np.uint8, shape, elements=st_h.integers(0, 1)),
                              arrays(np.uint8, shape, elements=st_h.integers(0, 1))))


class TestDsc:
    def test_identical(self):
        m = np.array([[1, 0], [1, 1]])
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        assert dsc(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0

    def test_hand_value(self):
        a = np.array([1, 1, 1, 0, 0, 0, 0])
        b = np.array([1, 1, 0, 1, 1, 1, 0])
        assert dsc(a[None], b[None]) == 0.5

    def test_empty_conventions(self):
        z = np.zeros((3, 3), np.uint8)
        assert dsc(z, z) == 1.0
        assert dsc(z, np.eye(3, dtype=np.uint8)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_binary(self):
        with pytest.raises(ValueError):
            dsc(np.array([[2]]), np.array([[1]]))

    @settings(max_examples=100, deadline=None)
    @given(masks)
    def test_properties(self, pair):
        a, b = pair
        value = dsc(a, b)
        assert value == dsc(b, a)
        assert 0.0 <= value <= 1.0
        assert dsc(a, a) == 1.0


class TestEvaluate:
    def _net(self, bias):
        params = st.zero_params(ARCH)
        params["head.b"] = np.array([bias])
        return params

    def test_perfect(self):
        ones = np.ones((16, 16), np.uint8)
        assert evaluate(self._net(5.0), [(np.zeros((16, 16)), ones)], ARCH) == 1.0

    def test_mean(self):
        ones = np.ones((16, 16), np.uint8)
        zeros = np.zeros((16, 16), np.uint8)
        assert evaluate(self._net(5.0), [(np.zeros((16, 16)), ones), (np.zeros((16, 16)), zeros)],
                        ARCH) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(self._net(0.0), [], ARCH)


class TestReports:
    def test_validation(self):
        with pytest.raises(ValueError):
            IterationReport(0, "top_dsc", 0.5)
        with pytest.raises(ValueError):
            IterationReport(1, "other", 0.5)
        with pytest.raises(ValueError):
            IterationReport(1, "top_dsc", 1.5)
        with pytest.raises(ValueError):
            IterationReport(2, "top_dsc", 0.5, ["a"], [])

    def test_empty_is_header_only(self, tmp_path):
        write_report([], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == "iteration,strategy,test_dsc,selected_ids,proxy_scores\n"

    def test_one_row(self, tmp_path):
        report = IterationReport(2, "top_dsc", 0.93562, ["a", "b"], [0.9, 0.8512345678])
        write_report([report], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == "2,top_dsc,0.935620,a;b,0.900000;0.851235"
        back = read_report(tmp_path / "r.csv")[0]
        assert back.selected_ids == ["a", "b"]
        assert back.proxy_scores == [0.9, 0.851235]
        assert back.test_dsc == 0.93562

    def test_nan_proxies(self, tmp_path):
        report = IterationReport(2, "unet_only", 0.5, ["x"], [float("nan")])
        write_report([report], tmp_path / "r.csv")
        assert math.isnan(read_report(tmp_path / "r.csv")[0].proxy_scores[0])
        write_jsonl([report], tmp_path / "r.jsonl")
        row = json.loads((tmp_path / "r.jsonl").read_text())
        assert row["proxy_scores"] == [None]

    def test_jsonl(self, tmp_path):
        reports = [IterationReport(1, "top_dsc", 0.25), IterationReport(2, "top_dsc", 1 / 3, ["s"], [0.5])]
        write_jsonl(reports, tmp_path / "r.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert rows[1] == {"iteration": 2, "strategy": "top_dsc", "test_dsc": 1 / 3,
                           "selected_ids": ["s"], "proxy_scores": [0.5]}

    def test_bad_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_report(tmp_path / "r.csv")
