import json

import jsonschema
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protoshot.evaluation import EpisodeSpec, EvalReport
from protoshot.report import (
    ReportError,
    collect_reports,
    curves_csv,
    emit_table,
    rank_row,
    read_report,
    report_schema,
    write_report,
    write_tables,
)


def rep(regime, cell, acc, hw=0.01, f1=None, episodes=10):
    n, k = (int(x) for x in cell.rstrip("s").split("w"))
    return EvalReport(
        spec=EpisodeSpec(n, k, episodes=episodes),
        accuracies=[acc] * episodes,
        f1_scores=[f1 if f1 is not None else acc] * episodes,
        acc_mean=acc,
        acc_half_width=hw,
        f1_mean=f1 if f1 is not None else acc,
        f1_half_width=hw,
        episode_digest="d" * 64,
        regime=regime,
        backbone="linear",
    )


def test_single_column_every_row_best():
    t = emit_table([rep("FEL", "2w1s", 0.6), rep("FEL", "5w5s", 0.4)])
    assert all(t.best(r) == "FEL" and t.second(r) is None for r in t.rows)


def test_ordering_example():
    t = emit_table([rep("A", "2w1s", 0.91), rep("B", "2w1s", 0.88), rep("C", "2w1s", 0.93)])
    assert t.best("2w1s") == "C" and t.second("2w1s") == "A"
    assert t.get("2w1s", "B").rank is None


def test_tie_is_annotated_and_broken_toward_earlier_column():
    t = emit_table([rep("A", "2w1s", 0.75), rep("B", "2w1s", 0.75)])
    assert t.best("2w1s") == "A" and t.second("2w1s") == "B"
    assert t.get("2w1s", "A").tie and t.get("2w1s", "B").tie
    assert "†" in t.to_markdown()
    assert "tie" in t.to_csv()


def test_conflicting_duplicate_rejected_identical_duplicate_accepted():
    a = rep("A", "2w1s", 0.7)
    emit_table([a, rep("A", "2w1s", 0.7)])
    with pytest.raises(ReportError, match="conflicting"):
        emit_table([a, rep("A", "2w1s", 0.71)])


def test_empty_and_unknown_column():
    with pytest.raises(ReportError):
        emit_table([])
    with pytest.raises(ReportError, match="column list"):
        emit_table([rep("A", "2w1s", 0.7)], columns=["B"])


def test_absent_cells_are_explicit():
    t = emit_table([rep("A", "2w1s", 0.7), rep("B", "5w1s", 0.5)], columns=["A", "B"])
    assert t.get("2w1s", "B") is None
    assert "n/a" in t.to_markdown()
    assert "2w1s,2,1,B,,,absent," in t.to_csv()


FIXTURE_MD = """\
accuracy (%), mean ± 95% half-width

| cell | FEL | FETL | DTL |
|---|---|---|---|
| 2w1s | <u>91.00 ± 1.00</u> | 88.00 ± 1.00 | **93.00 ± 1.00** |
| 5w10s | **60.00 ± 0.50** | <u>55.25 ± 0.50</u> | 40.00 ± 0.50 |

Bold: best per row. Underlined: second best.
"""

FIXTURE_CSV = """\
cell,N,K,regime,mean_pct,half_width_pct,rank,tie
2w1s,2,1,FEL,91.00,1.00,2,
2w1s,2,1,FETL,88.00,1.00,,
2w1s,2,1,DTL,93.00,1.00,1,
5w10s,5,10,FEL,60.00,0.50,1,
5w10s,5,10,FETL,55.25,0.50,2,
5w10s,5,10,DTL,40.00,0.50,,
"""


def fixture_reports():
    return [
        rep("FEL", "5w10s", 0.60, 0.005),
        rep("FETL", "5w10s", 0.5525, 0.005),
        rep("DTL", "5w10s", 0.40, 0.005),
        rep("FEL", "2w1s", 0.91),
        rep("FETL", "2w1s", 0.88),
        rep("DTL", "2w1s", 0.93),
    ]


def test_markdown_and_csv_match_fixture():
    t = emit_table(fixture_reports())
    assert t.rows == ["2w1s", "5w10s"]
    assert t.to_markdown() == FIXTURE_MD
    assert t.to_csv() == FIXTURE_CSV


def test_macro_f1_metric_ranks_f1_means():
    t = emit_table([rep("A", "2w1s", 0.9, f1=0.5), rep("B", "2w1s", 0.8, f1=0.6)], metric="macro_f1")
    assert t.best("2w1s") == "B"
    with pytest.raises(ReportError):
        t.render("xlsx")


@given(st.lists(st.one_of(st.none(), st.floats(0, 1)), min_size=1, max_size=6))
def test_rank_row_property(means):
    ranks, ties = rank_row(means)
    present = [m for m in means if m is not None]
    ranked = sorted((i for i, r in enumerate(ranks) if r), key=lambda i: ranks[i])
    assert len(ranked) == min(2, len(present))
    if ranked:
        assert means[ranked[0]] == max(present)
    # no unranked cell beats a ranked one
    for i, m in enumerate(means):
        if m is not None and ranks[i] is None:
            assert all(m <= means[j] for j in ranked)
    for i, t in enumerate(ties):
        assert t == (ranks[i] is not None and sum(m == means[i] for m in present) > 1)


def test_report_json_round_trip_and_schema(tmp_path):
    r = rep("FEL", "5w5s", 0.8)
    write_report(r, tmp_path / "FEL" / "5w5s.json")
    obj = json.loads((tmp_path / "FEL" / "5w5s.json").read_text())
    jsonschema.validate(obj, report_schema())
    assert read_report(tmp_path / "FEL" / "5w5s.json") == r
    obj["body"]["surprise"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(obj, report_schema())


def test_collect_and_write_tables(tmp_path):
    for r in fixture_reports():
        write_report(r, tmp_path / r.regime / f"{r.spec.cell}.json")
    (tmp_path / "FEL" / "notes.json").write_text("{}")  # ignored: not a cell name
    reports = collect_reports(tmp_path)
    assert len(reports) == 6
    t = write_tables(reports, tmp_path, ("csv", "md", "json"), ["FEL", "FETL", "DTL"])
    assert (tmp_path / "table.md").read_text() == FIXTURE_MD
    assert json.loads((tmp_path / "table.json").read_text())["columns"] == ["FEL", "FETL", "DTL"]
    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "regime,n_way,k_shot,acc_mean,acc_hw,f1_mean,f1_hw"
    assert curves[1].startswith("DTL,2,1,0.93,0.01,")
    assert len(curves) == 7 and t.best("5w10s") == "FEL"


def test_collect_errors(tmp_path):
    with pytest.raises(ReportError, match="no reports"):
        collect_reports(tmp_path)
    (tmp_path / "A").mkdir()
    (tmp_path / "A" / "2w1s.json").write_text("{not json")
    with pytest.raises(ReportError, match="not a valid"):
        collect_reports(tmp_path)


def test_curves_csv_orders_by_regime_then_cell():
    lines = curves_csv([rep("B", "5w1s", 0.5), rep("A", "5w2s", 0.6), rep("A", "2w10s", 0.9)]).splitlines()
    assert [l.split(",")[:3] for l in lines[1:]] == [["A", "2", "10"], ["A", "5", "2"], ["B", "5", "1"]]
