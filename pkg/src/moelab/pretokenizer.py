"""Multi-stage pretokenization.

Stages run in a fixed order: ASCII digit runs are isolated and chunked into
place-aligned groups of three; runs of whitespace-free scripts (CJK, Thai,
Lao, Khmer, Myanmar, Hangul) are isolated; the remaining text goes through a
word/punctuation splitter. Every stage is lossless, so the concatenated
pretokens reproduce the input exactly. The byte-level stage lives in
:mod:`moelab.bpe`.

Word/punctuation splitting rules, applied left to right:

* A whitespace run containing ``\\r`` or ``\\n`` yields a ``newline``
  pretoken that ends at its last line break.
* An optional single leading space plus a run of letters/marks is a ``word``.
* An apostrophe directly followed by letters (``'t``, ``'re``) is a ``word``.
* An optional single leading space plus a run of symbols (anything that is
  not a letter, mark, digit or whitespace) is ``punct``.
* Other whitespace forms a ``whitespace`` pretoken; when it is followed by a
  word or symbol, its final space is left to attach to that token.
"""

from __future__ import annotations

import bisect
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

DIGIT_SEGMENT_CAP = 510

KINDS = ("digits", "script_run", "word", "punct", "whitespace", "newline")


class PretokenizeError(ValueError):
    pass


class Pretoken(NamedTuple):
    text: str
    kind: str
    byte_span: tuple[int, int]


# ---------------------------------------------------------------- stage 1: digits


def chunk_digits(run: str) -> list[str]:
    """Split an ASCII digit run into right-aligned groups of three.

    Runs are first cut into segments of at most 510 digits; each segment then
    yields a leading group of ``len % 3`` digits (when nonzero) followed by
    exact triples.
    """
    if not run.isascii() or not run.isdigit():
        raise PretokenizeError(f"chunk_digits expects ASCII digits only, got {run[:20]!r}")
    return list(_digit_groups(run))


def _digit_groups(run: str) -> Iterator[str]:
    for seg_start in range(0, len(run), DIGIT_SEGMENT_CAP):
        seg = run[seg_start : seg_start + DIGIT_SEGMENT_CAP]
        head = len(seg) % 3
        if head:
            yield seg[:head]
        for i in range(head, len(seg), 3):
            yield seg[i : i + 3]


def _is_ascii_digit(ch: str) -> bool:
    return "0" <= ch <= "9"


# ---------------------------------------------------------------- stage 2: scripts


DEFAULT_SCRIPT_RANGES: dict[str, list[tuple[int, int]]] = {
    # half-open [start, end)
    "cjk": [
        (0x3400, 0x4DC0),  # CJK Unified Ideographs Extension A
        (0x4E00, 0xA000),  # CJK Unified Ideographs
        (0x3040, 0x30A0),  # Hiragana
        (0x30A0, 0x3100),  # Katakana
    ],
    "thai": [(0x0E00, 0x0E80)],
    "lao": [(0x0E80, 0x0F00)],
    "khmer": [(0x1780, 0x1800)],
    "myanmar": [(0x1000, 0x10A0)],
    "hangul_syllables": [(0xAC00, 0xD7A4)],
    "hangul_jamo": [(0x1100, 0x1200)],
}


@dataclass
class ScriptTable:
    ranges: dict[str, list[tuple[int, int]]] = field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_SCRIPT_RANGES.items()}
    )

    def __post_init__(self):
        flat = sorted((lo, hi, name) for name, rs in self.ranges.items() for lo, hi in rs)
        for (lo, hi, name), (lo2, _, name2) in zip(flat, flat[1:]):
            if lo2 < hi:
                raise ValueError(f"script ranges overlap: {name} and {name2}")
        for lo, hi, name in flat:
            if not lo < hi:
                raise ValueError(f"empty range for {name}: {lo:#x}..{hi:#x}")
        self._starts = [lo for lo, _, _ in flat]
        self._flat = flat

    def classify(self, ch: str) -> str:
        cp = ord(ch)
        i = bisect.bisect_right(self._starts, cp) - 1
        if i >= 0:
            lo, hi, name = self._flat[i]
            if lo <= cp < hi:
                return name
        return "other"


_DEFAULT_TABLE: ScriptTable | None = None


def default_script_table() -> ScriptTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = ScriptTable()
    return _DEFAULT_TABLE


def isolate_scripts(text: str, table: ScriptTable | None = None) -> list[tuple[str, str]]:
    """Group ``text`` into maximal same-script runs.

    Returns ``(script, substring)`` pairs where ``script`` is a table entry or
    ``"other"``.
    """
    table = table or default_script_table()
    out: list[tuple[str, str]] = []
    start = 0
    cur = None
    for i, ch in enumerate(text):
        s = table.classify(ch)
        if s != cur:
            if cur is not None:
                out.append((cur, text[start:i]))
            cur, start = s, i
    if cur is not None:
        out.append((cur, text[start:]))
    return out


# ---------------------------------------------------------------- stage 3: words


_LETTER, _SPACE, _NEWLINE, _SYMBOL, _APOS = range(5)


def _char_class(ch: str) -> int:
    if ch == "\n" or ch == "\r":
        return _NEWLINE
    if ch.isspace():
        return _SPACE
    if ch == "'" or ch == "’":
        return _APOS
    cat = unicodedata.category(ch)
    if cat[0] in "LMN":
        return _LETTER
    return _SYMBOL


def _split_word_spans(text: str) -> Iterator[tuple[int, int, str]]:
    classes = [_char_class(c) for c in text]
    n = len(text)
    i = 0
    while i < n:
        c = classes[i]
        if c in (_SPACE, _NEWLINE):
            j = i
            last_nl = -1
            while j < n and classes[j] in (_SPACE, _NEWLINE):
                if classes[j] == _NEWLINE:
                    last_nl = j
                j += 1
            if last_nl >= 0:
                yield i, last_nl + 1, "newline"
                i = last_nl + 1
                continue
            attach = j < n and text[j - 1] == " "
            if not attach:
                yield i, j, "whitespace"
                i = j
                continue
            if j - 1 > i:
                yield i, j - 1, "whitespace"
            start = j - 1
            i = j
            c = classes[i]
        else:
            start = i
        if c == _LETTER:
            while i < n and classes[i] == _LETTER:
                i += 1
            yield start, i, "word"
        elif c == _APOS and start == i and i + 1 < n and classes[i + 1] == _LETTER:
            i += 1
            while i < n and classes[i] == _LETTER:
                i += 1
            yield start, i, "word"
        else:
            while i < n and classes[i] in (_SYMBOL, _APOS):
                i += 1
            yield start, i, "punct"


def split_words(text: str) -> list[Pretoken]:
    """Word/punctuation segmentation of a digit- and script-free fragment.

    Byte spans are relative to ``text``.
    """
    return list(_with_byte_spans(text, _split_word_spans(text), 0))


# ---------------------------------------------------------------- pipeline


def _utf8_len(ch: str) -> int:
    cp = ord(ch)
    if cp < 0x80:
        return 1
    if cp < 0x800:
        return 2
    if 0xDC80 <= cp <= 0xDCFF:
        # surrogateescape'd raw byte
        return 1
    if cp < 0x10000:
        return 3
    return 4


def _with_byte_spans(text: str, spans, byte_base: int) -> Iterator[Pretoken]:
    pos = byte_base
    for s, e, kind in spans:
        piece = text[s:e]
        nb = sum(_utf8_len(c) for c in piece) if not piece.isascii() else len(piece)
        yield Pretoken(piece, kind, (pos, pos + nb))
        pos += nb


# digit runs arrive already cut into segments of at most DIGIT_SEGMENT_CAP
_DIGIT_OR_NOT = re.compile(r"[0-9]{1,%d}|[^0-9]+" % DIGIT_SEGMENT_CAP)


def _char_spans(text: str, table: ScriptTable) -> Iterator[tuple[int, int, str]]:
    for m in _DIGIT_OR_NOT.finditer(text):
        i, piece = m.start(), m.group()
        if _is_ascii_digit(piece[0]):
            k = i
            for g in _digit_groups(piece):
                yield k, k + len(g), "digits"
                k += len(g)
            continue
        off = i
        for script, sub in isolate_scripts(piece, table):
            if script == "other":
                for s, e, kind in _split_word_spans(sub):
                    yield off + s, off + e, kind
            else:
                yield off, off + len(sub), "script_run"
            off += len(sub)


def iter_pretokens(text: str | bytes, table: ScriptTable | None = None) -> Iterator[Pretoken]:
    """Stream the pretokens of ``text``; memory stays bounded by the longest pretoken."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="surrogateescape")
    table = table or default_script_table()
    return _with_byte_spans(text, _char_spans(text, table), 0)


def pretokenize(text: str | bytes, table: ScriptTable | None = None) -> list[Pretoken]:
    """Segment ``text`` into pretokens whose concatenation is the input.

    ``bytes`` input is decoded as UTF-8 with ``surrogateescape`` so arbitrary
    byte strings survive; spans are always byte offsets into the UTF-8 form.
    """
    return list(iter_pretokens(text, table))


def pretoken_bytes(tok: Pretoken) -> bytes:
    return tok.text.encode("utf-8", errors="surrogateescape")
