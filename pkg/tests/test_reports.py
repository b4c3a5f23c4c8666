import json
import sys
from pathlib import Path

import pytest

from fvlm.atlas import AnatomyTable
from fvlm.reports import (
    AnatomyLexicon,
    RawReport,
    RuleExtractor,
    SubprocessExtractor,
    decompose,
    detect_mentions,
    extract_description,
    merge_sections,
    read_decomposed,
    read_reports,
    write_decomposed,
)

GOLD = Path(__file__).parent / "data" / "gold_reports.jsonl"


@pytest.fixture(scope="module")
def lexicon():
    return AnatomyLexicon.default()


@pytest.fixture(scope="module")
def table():
    return AnatomyTable.default()


def test_detect_examples(lexicon):
    rule = RuleExtractor(lexicon)
    assert detect_mentions("wall thickening of the jejunum", lexicon, rule) == {"Small bowel"}
    assert detect_mentions("", lexicon, rule) == set()
    assert detect_mentions("Acute pancreatitis is considered. Liver cyst.", lexicon, rule) == {"Pancreas", "Liver"}


def test_detect_word_boundaries(lexicon):
    assert lexicon.matches("delivered to the ward") == set()
    assert lexicon.matches("The GALLBLADDER is normal") == {"Gall bladder"}
    assert lexicon.matches("gall bladder") == {"Gall bladder"}


def test_lexicon_rejects_duplicate_forms():
    with pytest.raises(ValueError):
        AnatomyLexicon({"A": ["x"], "B": ["X"]})


def test_extract_examples(lexicon):
    rule = RuleExtractor(lexicon)
    assert extract_description("The liver is enlarged.", "Liver", rule) == "The liver is enlarged."
    assert extract_description("The liver is enlarged.", "Spleen", rule) is None
    text = "The liver is enlarged. The spleen is normal. Liver cyst noted."
    assert extract_description(text, "Liver", rule) == "The liver is enlarged. Liver cyst noted."


def test_merge_sections():
    assert merge_sections("Liver is enlarged.", "Fatty liver.", "Liver") == "Liver is enlarged. Fatty liver."
    assert merge_sections("Liver is enlarged.", None, "Liver") == "Liver is enlarged. null"
    assert merge_sections(None, "Fatty liver.", "Liver") == "null Fatty liver."
    assert merge_sections(None, None, "Liver") == "Liver shows no significant abnormalities."


def test_decompose_pancreatitis(lexicon, table):
    r = RawReport("p1", "The pancreas is swollen. Acute pancreatitis is considered.", "Acute pancreatitis.")
    d = decompose(r, lexicon, table)
    assert [e.anatomy for e in d.entries] == table.groups
    assert d["Pancreas"].normal is False
    assert d["Pancreas"].merged == "The pancreas is swollen. Acute pancreatitis is considered. Acute pancreatitis."
    for e in d.entries:
        if e.anatomy != "Pancreas":
            assert e.normal and e.merged == f"{e.anatomy} shows no significant abnormalities."


def test_decompose_empty(lexicon, table):
    d = decompose(RawReport("p0"), lexicon, table)
    assert all(e.normal for e in d.entries)
    assert all(e.merged.endswith("shows no significant abnormalities.") for e in d.entries)


def test_findings_only_is_normal_and_warned(lexicon, table):
    d = decompose(RawReport("p2", "Small liver cyst.", "Splenomegaly."), lexicon, table)
    assert d["Liver"].merged == "Small liver cyst. null"
    assert d["Liver"].normal is True
    assert d["Spleen"].normal is False
    assert any("Liver" in w and "findings only" in w for w in d.warnings)


def test_normal_flag_depends_only_on_impression(lexicon, table):
    a = decompose(RawReport("x", "", "Fatty liver."), lexicon, table)
    b = decompose(RawReport("x", "Huge liver mass with necrosis.", "Fatty liver."), lexicon, table)
    assert a.normal_flags() == b.normal_flags()


def test_decompose_idempotent_on_parts(lexicon, table):
    r = RawReport("x", "Liver cyst. The spleen is normal; renal stone.", "Liver cyst. Left nephrolithiasis.")
    d = decompose(r, lexicon, table)
    rebuilt = RawReport(
        "x",
        " ".join(e.findings_part for e in d.entries if e.findings_part),
        " ".join(e.impression_part for e in d.entries if e.impression_part),
    )
    assert decompose(rebuilt, lexicon, table).entries == d.entries
    assert decompose(r, lexicon, table).entries == d.entries


def _f1(pred: set, gold: set) -> tuple[int, int, int]:
    return len(pred & gold), len(pred - gold), len(gold - pred)


def test_gold_corpus_mention_f1(lexicon):
    tp = fp = fn = 0
    rule = RuleExtractor(lexicon)
    for line in GOLD.read_text().splitlines():
        row = json.loads(line)
        for section in ("findings", "impression"):
            pred = detect_mentions(row[section], lexicon, rule) - set(row["uncovered"][section])
            a, b, c = _f1(pred, set(row[f"gold_{section}"]))
            tp, fp, fn = tp + a, fp + b, fn + c
    f1 = 2 * tp / (2 * tp + fp + fn)
    assert f1 == 1.0


def test_jsonl_roundtrip_and_errors(tmp_path, lexicon, table):
    src = tmp_path / "corpus.jsonl"
    src.write_text('{"patient_id": "a", "findings": "Liver cyst.", "impression": "Liver cyst."}\n')
    reports = read_reports(src)
    out = tmp_path / "out.jsonl"
    write_decomposed(out, [decompose(r, lexicon, table) for r in reports])
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == table.T
    assert set(rows[0]) == {"patient_id", "anatomy", "merged", "normal", "findings_part", "impression_part"}
    back = read_decomposed(out)
    assert back["a"]["Liver"].normal is False
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"patient_id": "a"}\nnot json\n')
    with pytest.raises(ValueError, match="line 2"):
        read_reports(bad)


ECHO_EXTRACTOR = r"""
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    hit = req["anatomy"] == "Liver" and "hepar" in req["section"]
    print(json.dumps({"mentioned": hit, "text": "hepar abnormal" if hit else None}), flush=True)
"""


def test_subprocess_extractor_protocol(tmp_path, lexicon):
    table = AnatomyTable.from_dict({"groups": ["Liver", "Spleen"], "fine_to_group": {"Liver": "Liver", "Spleen": "Spleen"}})
    script = tmp_path / "ext.py"
    script.write_text(ECHO_EXTRACTOR)
    ext = SubprocessExtractor([sys.executable, str(script)], table.groups)
    try:
        d = decompose(RawReport("q", "", "The hepar is odd."), lexicon, table, ext)
    finally:
        ext.close()
    assert d["Liver"].impression_part == "hepar abnormal"
    assert d["Liver"].normal is False and d["Spleen"].normal is True


def test_failing_extractor_falls_back(lexicon):
    table = AnatomyTable.from_dict({"groups": ["Liver"], "fine_to_group": {"Liver": "Liver"}})
    ext = SubprocessExtractor([sys.executable, "-c", "import sys; sys.exit(0)"], table.groups)
    d = decompose(RawReport("q", "", "Fatty liver."), lexicon, table, ext)
    assert d["Liver"].impression_part == "Fatty liver."
    assert any("fallback" in w for w in d.warnings)
