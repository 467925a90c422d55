import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsae import report
from speechsae.analysis import ActivationIndex
from speechsae.errors import ContractError, InputError
from speechsae.report import HighlightDoc, ramp, render_highlight, render_plain, strip_markup

from helpers import char_alignment


def test_ramp_endpoints_and_midpoint():
    assert ramp(0.0) == (255, 255, 255)
    assert ramp(1.0) == (255, 165, 0)
    # 255 + 0.5 * (165 - 255) = 210 ; 255 + 0.5 * (0 - 255) = 127.5 -> 128
    assert ramp(0.5) == (255, 210, 128)


def test_render_all_zero_is_plain():
    doc = HighlightDoc("f", "a<b", (0.0, 0.0, 0.0), 1, 1.0)
    html = render_highlight(doc)
    assert "<span" not in html and "a&lt;b" in html
    assert render_plain(doc) == "a<b"


def test_render_single_full_char():
    doc = HighlightDoc("f", "abc", (0.0, 1.0, 0.0), 1, 2.0)
    html = render_highlight(doc)
    assert html.count("<span") == 1
    assert '<span style="background-color:rgb(255,165,0)">b</span>' in html
    assert render_plain(doc) == "a*b*c"


def test_doc_validation():
    with pytest.raises(ContractError):
        HighlightDoc("f", "ab", (0.0,), 1, 1.0)
    with pytest.raises(ContractError):
        HighlightDoc("f", "ab", (0.0, 1.5), 1, 1.0)
    with pytest.raises(ContractError):
        render_highlight(HighlightDoc("f", "ab", (0.0, 0.5), 1, 0.0))


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=40), st.data())
def test_strip_markup_recovers_transcript(text, data):
    vals = data.draw(st.lists(st.floats(0, 1), min_size=len(text), max_size=len(text)))
    doc = HighlightDoc("f", text, tuple(vals), 3, 1.0)
    assert strip_markup(render_highlight(doc)) == text


def test_highlight_docs_and_top_files():
    text = "ab cd"
    entries = [(0, "x", 1, 1.0), (0, "y", 6, 4.0), (0, "y", 0, 2.0), (0, "z", 9, 3.0)]
    idx = ActivationIndex.from_entries(["x", "y", "z", "w"], [10] * 4, 1, 1, entries)
    assert report.top_files(idx, 0, 5) == ["y", "z", "x"]
    assert report.top_files(idx, 0, 2) == ["y", "z"]
    als = {f: char_alignment(f, text) for f in "xyzw"}
    docs = report.highlight_docs(idx, 0, ["y", "x"], {f: text for f in "xyzw"}, als)
    y, x = docs
    assert y.norm_max == 4.0
    # y: frame 0 -> "a" at 2.0, frame 6 -> "c" at 4.0
    assert y.intensities == (0.5, 0.0, 0.0, 1.0, 0.0)
    assert x.intensities == (0.25, 0.0, 0.0, 0.0, 0.0)
    assert render_plain(y) == "*a*b *c*d"
    with pytest.raises(InputError):
        report.highlight_docs(idx, 0, ["x"], {}, als)
