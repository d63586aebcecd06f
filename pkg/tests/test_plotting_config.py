import xml.etree.ElementTree as ET
from dataclasses import dataclass

import pytest

from omnilab.config import ConfigError, build_dataclass, config_hash
from omnilab.plotting import emit_plot, render_svg

SVG = "{http://www.w3.org/2000/svg}"


def test_one_two_point_series():
    root = ET.fromstring(render_svg({"a": ([1, 2], [0.5, 0.1])}))
    assert len(root.findall(f".//{SVG}polyline")) == 1


def test_four_series_legend_and_threshold(tmp_path):
    names = ["omni_rope", "qwen_accum", "lumina_accum", "omni_rope+index_emb"]
    curves = {n: (list(range(1, 11)), [1.0 / (i + k + 1) for k in range(10)]) for i, n in enumerate(names)}
    path = tmp_path / "p.svg"
    emit_plot(curves, path, threshold=0.014, title="loss <&> curves")
    root = ET.parse(path).getroot()
    lines = root.findall(f".//{SVG}polyline")
    assert sorted(l.get("data-series") for l in lines) == sorted(names)
    texts = [t.text for t in root.iter(f"{SVG}text")]
    assert all(n in texts for n in names)
    assert any(l.get("stroke-dasharray") for l in root.iter(f"{SVG}line"))
    assert "href" not in path.read_text()


@pytest.mark.parametrize("curves", [{}, {"a": ([1], [1.0])}, {"a": ([1, 2], [1.0])}])
def test_bad_series(curves):
    with pytest.raises(ValueError):
        render_svg(curves)


def test_nonpositive_values_still_plot():
    ET.fromstring(render_svg({"a": ([1, 2, 3], [0.0, 1e-3, float("inf")])}))


@dataclass(frozen=True)
class Inner:
    x: int = 1
    y: float = 0.5


@dataclass(frozen=True)
class Outer:
    inner: Inner = Inner()
    name: str = "n"
    items: tuple = (1, 2)

    def __post_init__(self):
        if self.inner.x < 0:
            raise ValueError("x must be >= 0")


def test_hash_is_key_order_invariant():
    assert config_hash({"a": 1, "b": {"c": [1, 2], "d": 2}}) == config_hash({"b": {"d": 2, "c": [1, 2]}, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_build_dataclass_paths():
    assert build_dataclass(Outer, {"inner": {"y": 2}, "items": [3]}) == Outer(Inner(1, 2.0), "n", (3,))
    with pytest.raises(ConfigError, match=r"^inner\.x: expected an integer"):
        build_dataclass(Outer, {"inner": {"x": "3"}})
    with pytest.raises(ConfigError, match=r"^inner\.z: unknown field"):
        build_dataclass(Outer, {"inner": {"z": 1}})
    with pytest.raises(ConfigError, match="x must be"):
        build_dataclass(Outer, {"inner": {"x": -1}})
