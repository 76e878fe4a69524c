import math
import xml.etree.ElementTree as ET

from unlearnlab.plots import bar_chart, line_plot, scatter_panels

NS = "{http://www.w3.org/2000/svg}"


def test_scatter_draws_one_marker_per_point():
    pts = [{"panel": "p", "method": m, "x": 0.9, "y": y} for m, y in [("a", 0.1), ("b", 0.5)]]
    svg = scatter_panels(pts, ["p"])
    assert svg == scatter_panels(pts, ["p"])
    assert len(ET.fromstring(svg).findall(f".//{NS}circle")) == 2


def test_empty_inputs_still_give_axes():
    for svg in (scatter_panels([], ["p"]), line_plot({}), bar_chart({})):
        root = ET.fromstring(svg)
        assert root.tag == f"{NS}svg" and root.findall(f".//{NS}line")


def test_non_finite_values_do_not_leak_into_markup():
    svg = line_plot({"a": ([0, 0.5, 1], [1.0, math.nan, 0.8])}) + bar_chart({"x": math.inf})
    assert "nan" not in svg.lower() and "inf" not in svg.lower()
