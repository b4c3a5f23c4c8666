"""Split radiology reports into per-anatomy descriptions with a normality flag.

Findings and impression are processed independently: mentions are detected
(extractor output plus a lexicon string match), sentences are extracted per
anatomy, and the two halves are merged. An anatomy is *normal* exactly when
the impression does not describe it.
"""

from __future__ import annotations

import json
import logging
import re
import subprocess
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from fvlm.atlas import AnatomyTable

log = logging.getLogger(__name__)

NULL_TOKEN = "null"
SEPARATOR = " "
_SENTENCE_SPLIT = re.compile(r"(?<=\.)\s+|;|\n+")


def default_sentence(anatomy: str) -> str:
    return f"{anatomy} shows no significant abnormalities."


@dataclass
class RawReport:
    patient_id: str
    findings: str = ""
    impression: str = ""

    @classmethod
    def from_dict(cls, obj: dict) -> "RawReport":
        return cls(str(obj["patient_id"]), obj.get("findings") or "", obj.get("impression") or "")


class AnatomyLexicon:
    """Lowercase surface forms per grouped anatomy, matched longest-first."""

    def __init__(self, forms: dict[str, Iterable[str]]):
        self.forms: dict[str, tuple[str, ...]] = {}
        owner: dict[str, str] = {}
        for anatomy, fs in forms.items():
            clean = []
            for f in fs:
                f = f.strip().lower()
                if not f:
                    continue
                if owner.get(f, anatomy) != anatomy:
                    raise ValueError(f"surface form {f!r} maps to both {owner[f]!r} and {anatomy!r}")
                owner[f] = anatomy
                clean.append(f)
            self.forms[anatomy] = tuple(dict.fromkeys(clean))
        self._owner = owner
        ordered = sorted(owner, key=lambda f: (-len(f), f))
        body = "|".join(re.escape(f) for f in ordered) or r"(?!x)x"
        self._pattern = re.compile(rf"\b(?:{body})\b", re.IGNORECASE)

    @classmethod
    def load(cls, path: str | Path) -> "AnatomyLexicon":
        return cls(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "AnatomyLexicon":
        return cls(json.loads(resources.files("fvlm").joinpath("data/lexicon.json").read_text()))

    def covering(self, table: AnatomyTable) -> "AnatomyLexicon":
        """Lexicon restricted to ``table`` groups; groups without forms match their own name."""
        forms = {g: self.forms.get(g) or (g.lower(),) for g in table.groups}
        return AnatomyLexicon(forms)

    def matches(self, text: str) -> set[str]:
        return {self._owner[m.group(0).lower()] for m in self._pattern.finditer(text)}

    def to_dict(self) -> dict[str, list[str]]:
        return {a: list(fs) for a, fs in self.forms.items()}


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s and s.strip()]


class Extractor(Protocol):
    id: str

    def detect(self, section: str) -> set[str]: ...

    def extract(self, section: str, anatomy: str) -> str | None: ...


class RuleExtractor:
    """Sentence-level extraction: keep every sentence naming the anatomy."""

    id = "rule-v1"

    def __init__(self, lexicon: AnatomyLexicon):
        self.lexicon = lexicon

    def detect(self, section: str) -> set[str]:
        return self.lexicon.matches(section)

    def extract(self, section: str, anatomy: str) -> str | None:
        keep = [s for s in split_sentences(section) if anatomy in self.lexicon.matches(s)]
        return SEPARATOR.join(keep) if keep else None


class SubprocessExtractor:
    """Line-delimited JSON bridge to an external extractor process.

    Each request is ``{"section": ..., "anatomy": ...}`` on one line; the
    process answers ``{"mentioned": bool, "text": str | null}`` on one line.
    """

    def __init__(self, command: Sequence[str] | str, anatomies: Sequence[str]):
        self.command = command
        self.anatomies = list(anatomies)
        self.id = f"subprocess:{command if isinstance(command, str) else ' '.join(command)}"
        self._proc: subprocess.Popen | None = None
        self._cache: dict[tuple[str, str], dict] = {}

    def _ask(self, section: str, anatomy: str) -> dict:
        key = (section, anatomy)
        if key in self._cache:
            return self._cache[key]
        if self._proc is None:
            self._proc = subprocess.Popen(
                self.command,
                shell=isinstance(self.command, str),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps({"section": section, "anatomy": anatomy}) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external extractor closed its output")
        reply = json.loads(line)
        self._cache[key] = reply
        return reply

    def detect(self, section: str) -> set[str]:
        return {a for a in self.anatomies if self._ask(section, a).get("mentioned")}

    def extract(self, section: str, anatomy: str) -> str | None:
        reply = self._ask(section, anatomy)
        if not reply.get("mentioned"):
            return None
        return reply.get("text") or None

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()  # type: ignore[union-attr]
            self._proc.wait(timeout=10)
            self._proc = None


def detect_mentions(
    section: str, lexicon: AnatomyLexicon, extractor: Extractor | None = None, warnings: list | None = None
) -> set[str]:
    found = lexicon.matches(section)
    if extractor is not None:
        try:
            found |= extractor.detect(section)
        except Exception as exc:  # extractor is external code
            msg = f"extractor {getattr(extractor, 'id', '?')} failed in detect ({exc}); lexicon-only fallback"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
    return found


def extract_description(
    section: str,
    anatomy: str,
    extractor: Extractor,
    fallback: Extractor | None = None,
    warnings: list | None = None,
) -> str | None:
    try:
        return extractor.extract(section, anatomy)
    except Exception as exc:
        if fallback is None:
            raise
        msg = f"extractor {getattr(extractor, 'id', '?')} failed extracting {anatomy} ({exc}); rule fallback"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return fallback.extract(section, anatomy)


def merge_sections(findings_part: str | None, impression_part: str | None, anatomy: str) -> str:
    if findings_part is None and impression_part is None:
        return default_sentence(anatomy)
    return SEPARATOR.join([findings_part or NULL_TOKEN, impression_part or NULL_TOKEN])


@dataclass
class AnatomyEntry:
    anatomy: str
    merged: str
    normal: bool
    findings_part: str | None = None
    impression_part: str | None = None


@dataclass
class DecomposedReport:
    patient_id: str
    entries: list[AnatomyEntry]
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, anatomy: str) -> AnatomyEntry:
        for e in self.entries:
            if e.anatomy == anatomy:
                return e
        raise KeyError(anatomy)

    def rows(self) -> Iterator[dict]:
        for e in self.entries:
            yield {"patient_id": self.patient_id, **asdict(e)}

    def normal_flags(self) -> dict[str, bool]:
        return {e.anatomy: e.normal for e in self.entries}


def decompose(
    report: RawReport,
    lexicon: AnatomyLexicon,
    table: AnatomyTable,
    extractor: Extractor | None = None,
) -> DecomposedReport:
    lexicon = lexicon.covering(table)
    rule = RuleExtractor(lexicon)
    warnings: list[str] = []
    parts: dict[str, dict[str, str | None]] = {}
    for section_name in ("findings", "impression"):
        section = getattr(report, section_name)
        mentioned = detect_mentions(section, lexicon, extractor, warnings)
        active = extractor if extractor is not None else rule
        for anatomy in table.groups:
            text = None
            if anatomy in mentioned:
                text = extract_description(section, anatomy, active, rule, warnings)
            parts.setdefault(anatomy, {})[section_name] = text

    entries = []
    for anatomy in table.groups:
        f, i = parts[anatomy]["findings"], parts[anatomy]["impression"]
        if f is not None and i is None:
            warnings.append(f"{report.patient_id}: {anatomy} described in findings only; marked normal")
        entries.append(AnatomyEntry(anatomy, merge_sections(f, i, anatomy), i is None, f, i))
    return DecomposedReport(report.patient_id, entries, warnings)


# --- corpus I/O -----------------------------------------------------------------


class CorpusFormatError(ValueError):
    pass


def read_reports(path: str | Path) -> list[RawReport]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(RawReport.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: malformed report record ({exc})") from None
    return out


def write_reports(path: str | Path, reports: Iterable[RawReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def write_decomposed(path: str | Path, decomposed: Iterable[DecomposedReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decomposed:
            for row in d.rows():
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_decomposed(path: str | Path) -> dict[str, DecomposedReport]:
    out: dict[str, DecomposedReport] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            pid = row.pop("patient_id")
            out.setdefault(pid, DecomposedReport(pid, [])).entries.append(AnatomyEntry(**row))
    return out
