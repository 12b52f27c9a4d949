"""Word error rate scoring: plain, permutation-best and speaker-agnostic multi-stream."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_MAX_STATES = 250_000
_PUNCT = str.maketrans("", "", string.punctuation)


class ScoringError(ValueError):
    pass


class StateSpaceTooLargeError(ScoringError):
    pass


def normalize_word(word: str) -> str:
    return word.lower().translate(_PUNCT).strip()


@dataclass(frozen=True)
class Transcript:
    tokens: tuple[str, ...]
    times: tuple[tuple[float, float], ...] | None = None
    stream_id: str = "0"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.times is not None:
            times = tuple((float(a), float(b)) for a, b in self.times)
            if len(times) != len(self.tokens):
                raise ScoringError(f"{len(self.tokens)} tokens but {len(times)} time stamps")
            if any(b < a for a, b in times) or any(times[i + 1][0] < times[i][0] for i in range(len(times) - 1)):
                raise ScoringError(f"stream {self.stream_id}: token times must be non-decreasing")
            object.__setattr__(self, "times", times)

    @classmethod
    def from_text(cls, text: str, stream_id: str = "0", times=None) -> "Transcript":
        words = text.split()
        if times is not None:
            pairs = [(normalize_word(w), t) for w, t in zip(words, times)]
            pairs = [(w, t) for w, t in pairs if w]
            return cls(tuple(w for w, _ in pairs), tuple(t for _, t in pairs), stream_id)
        return cls(tuple(w for w in map(normalize_word, words) if w), None, stream_id)

    def __len__(self):
        return len(self.tokens)

    @property
    def span(self) -> tuple[float, float]:
        if not self.times:
            raise ScoringError(f"stream {self.stream_id} has no token times")
        return self.times[0][0], max(b for _, b in self.times)


@dataclass
class WERReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    assignment: tuple | None = None
    alignment: list = field(default_factory=list, repr=False)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def as_dict(self) -> dict:
        return {"substitutions": self.substitutions, "deletions": self.deletions,
                "insertions": self.insertions, "ref_words": self.ref_words,
                "wer": self.wer, "assignment": list(self.assignment) if self.assignment else None}

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.as_dict().items())


def _tokens(t) -> tuple[str, ...]:
    return t.tokens if isinstance(t, Transcript) else tuple(t)


def edit_counts(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int, int, list]:
    """Unit-cost Levenshtein; backtrace prefers substitution/match, then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = de = ins = 0
    ops = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = "C" if ref[i - 1] == hyp[j - 1] else "S"
            s += op == "S"
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            op, i = "D", i - 1
            de += 1
        else:
            op, j = "I", j - 1
            ins += 1
        ops.append(op)
    return s, de, ins, ops[::-1]


def wer(hyp, ref) -> WERReport:
    r, h = _tokens(ref), _tokens(hyp)
    if not r:
        raise ScoringError("WER is undefined for an empty reference")
    s, d, i, ops = edit_counts(h, r)
    return WERReport(s, d, i, len(r), alignment=ops)


def best_permutation_wer(hyps: Sequence, refs: Sequence) -> WERReport:
    """Minimum pooled WER over all hypothesis-to-reference assignments.

    ``assignment[j]`` is the hypothesis index scored against reference ``j``;
    missing streams on either side count as empty.
    """
    if not refs and not hyps:
        raise ScoringError("need at least one stream")
    n = max(len(hyps), len(refs))
    h = [_tokens(x) for x in hyps] + [()] * (n - len(hyps))
    r = [_tokens(x) for x in refs] + [()] * (n - len(refs))
    total_ref = sum(map(len, r))
    if total_ref == 0:
        raise ScoringError("all references are empty")
    pair = [[edit_counts(h[a], r[b])[:3] for a in range(n)] for b in range(n)]
    best = None
    for p in permutations(range(n)):
        counts = [pair[j][p[j]] for j in range(n)]
        err = sum(map(sum, counts))
        if best is None or err < best[0]:
            best = (err, p, counts)
    _, p, counts = best
    return WERReport(sum(c[0] for c in counts), sum(c[1] for c in counts),
                     sum(c[2] for c in counts), total_ref, tuple(p))


def lattice_size(hyps: Sequence, refs: Sequence) -> int:
    return int(np.prod([len(_tokens(x)) + 1 for x in list(refs) + list(hyps)], dtype=np.float64))


def speaker_agnostic_wer(hyps: Sequence, refs: Sequence, max_states: int = DEFAULT_MAX_STATES,
                         max_streams: int = 4) -> WERReport:
    """Exact multi-dimensional Levenshtein over the joint ref x hyp position lattice.

    A lattice state holds one position per reference and per hypothesis stream.
    Each step consumes one reference word (deletion), one hypothesis word
    (insertion), or one of each (match or substitution), from any streams. Each
    stream is consumed in order, but words may pair across streams.
    """
    rs, hs = [_tokens(x) for x in refs], [_tokens(x) for x in hyps]
    if len(rs) > max_streams or len(hs) > max_streams:
        raise StateSpaceTooLargeError(
            f"{len(rs)} reference / {len(hs)} hypothesis streams exceed the bound of {max_streams}; "
            "segment the recording first (utterance_group_segment)")
    total_ref = sum(map(len, rs))
    if total_ref == 0:
        raise ScoringError("all references are empty")
    seqs = rs + hs
    dims = tuple(len(s) + 1 for s in seqs)
    size = lattice_size(hs, rs)
    if size > max_states:
        raise StateSpaceTooLargeError(
            f"lattice has {size} states (bound {max_states}); segment the recording first "
            "(utterance_group_segment) and score segment by segment")
    nr = len(rs)
    strides = np.cumprod((1,) + dims[:0:-1])[::-1]
    inf = np.iinfo(np.int64).max // 4
    cost = np.full(size, inf, dtype=np.int64)
    cost[0] = 0
    # moves: (kind, ref stream or -1, hyp stream or -1); order is the backtrace preference
    moves = [("P", a, b) for a in range(nr) for b in range(len(hs))]
    moves += [("D", a, -1) for a in range(nr)] + [("I", -1, b) for b in range(len(hs))]

    def step_cost(pos, kind, a, b):
        if kind == "P":
            return int(rs[a][pos[a] - 1] != hs[b][pos[nr + b] - 1])
        return 1

    def preds(pos):
        for kind, a, b in moves:
            if (a >= 0 and pos[a] == 0) or (b >= 0 and pos[nr + b] == 0):
                continue
            delta = (strides[a] if a >= 0 else 0) + (strides[nr + b] if b >= 0 else 0)
            yield kind, a, b, delta

    for flat, pos in enumerate(np.ndindex(*dims)):
        if flat == 0:
            continue
        best = inf
        for kind, a, b, delta in preds(pos):
            c = cost[flat - delta] + step_cost(pos, kind, a, b)
            if c < best:
                best = c
        cost[flat] = best

    # backtrace
    s = d = i = 0
    ops = []
    pos = [x - 1 for x in dims]
    flat = size - 1
    while flat:
        for kind, a, b, delta in preds(pos):
            c = step_cost(pos, kind, a, b)
            if cost[flat - delta] + c == cost[flat]:
                break
        if kind == "P":
            s += c
            ops.append(("S" if c else "C", a, b))
        elif kind == "D":
            d += 1
            ops.append(("D", a, None))
        else:
            i += 1
            ops.append(("I", None, b))
        if a >= 0:
            pos[a] -= 1
        if b >= 0:
            pos[nr + b] -= 1
        flat -= delta
    return WERReport(s, d, i, total_ref, alignment=ops[::-1])


# ---------------------------------------------------------------- segmentation

def _merge(intervals):
    out = []
    for a, b in sorted(intervals):
        if out and a < out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def utterance_group_segment(refs: Sequence[Transcript], max_silence: float = 0.5) -> list[tuple[float, float]]:
    """Partition the reference timeline into utterance groups.

    Each ``Transcript`` is one utterance. A cut is placed at the midpoint of
    every token-free gap that lasts at least ``max_silence`` or that no
    utterance spans (a non-overlapping utterance boundary). Returns contiguous
    ``(start, end)`` segments covering first token start to last token end.
    """
    utts = [u for u in refs if len(u)]
    if not utts:
        raise ScoringError("no reference tokens to segment")
    if any(u.times is None for u in utts):
        raise ScoringError("utterance_group_segment needs token times on every reference")
    busy = _merge([list(t) for u in utts for t in u.times])
    spans = [u.span for u in utts]
    cuts = []
    for (_, gap_start), (gap_end, _) in zip(busy[:-1], busy[1:]):
        spanned = any(a < gap_start and b > gap_end for a, b in spans)
        if gap_end - gap_start >= max_silence or not spanned:
            cuts.append(0.5 * (gap_start + gap_end))
    edges = [busy[0][0]] + cuts + [busy[-1][1]]
    return list(zip(edges[:-1], edges[1:]))


def split_by_segments(transcripts: Sequence[Transcript], segments: Sequence[tuple[float, float]]):
    """Per segment, each stream's tokens whose midpoint falls inside it (last segment closed)."""
    out = [[] for _ in segments]
    bounds = [b for _, b in segments]
    for t in transcripts:
        if t.times is None:
            raise ScoringError(f"stream {t.stream_id} has no token times")
        buckets = [[] for _ in segments]
        for w, (a, b) in zip(t.tokens, t.times):
            k = min(int(np.searchsorted(bounds, 0.5 * (a + b), side="right")), len(segments) - 1)
            buckets[k].append((w, (a, b)))
        for k, items in enumerate(buckets):
            out[k].append(Transcript(tuple(w for w, _ in items), tuple(x for _, x in items), t.stream_id))
    return out


def segmented_speaker_agnostic_wer(hyps: Sequence[Transcript], refs: Sequence[Transcript],
                                   max_silence: float = 0.5, max_states: int = DEFAULT_MAX_STATES) -> WERReport:
    """Speaker-agnostic WER pooled over utterance groups of the reference timeline."""
    segments = utterance_group_segment(refs, max_silence)
    h_parts, r_parts = split_by_segments(hyps, segments), split_by_segments(refs, segments)
    s = d = i = n = 0
    for hp, rp in zip(h_parts, r_parts):
        rp = [r for r in rp if len(r)]
        hp = [h for h in hp if len(h)]
        if not rp:
            i += sum(map(len, hp))
            continue
        rep = speaker_agnostic_wer(hp, rp, max_states=max_states)
        s, d, i, n = s + rep.substitutions, d + rep.deletions, i + rep.insertions, n + rep.ref_words
    if n == 0:
        raise ScoringError("all references are empty")
    return WERReport(s, d, i, n, assignment=tuple(segments))


# ---------------------------------------------------------------- JSONL I/O

def read_transcripts(path: str | Path, by: str = "stream_id") -> list[Transcript]:
    """Group ``{stream_id, start_s, end_s, word}`` lines into time-sorted transcripts.

    ``by="utterance_id"`` groups on an optional utterance field instead (falls back to the stream).
    """
    groups: dict[str, list] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"stream_id", "start_s", "end_s", "word"} - set(rec)
            if missing:
                raise ScoringError(f"{path}:{n}: missing fields {sorted(missing)}")
            key = str(rec.get(by, rec["stream_id"]))
            groups.setdefault(key, []).append((float(rec["start_s"]), float(rec["end_s"]),
                                               rec["word"], str(rec["stream_id"])))
    out = []
    for key, items in groups.items():
        items.sort(key=lambda x: (x[0], x[1]))
        words = [(normalize_word(w), (a, b)) for a, b, w, _ in items]
        words = [(w, t) for w, t in words if w]
        out.append(Transcript(tuple(w for w, _ in words), tuple(t for _, t in words), items[0][3]))
    return out


def write_transcripts(path: str | Path, transcripts: Sequence[Transcript]) -> None:
    with open(path, "w") as f:
        for t in transcripts:
            if t.times is None:
                raise ScoringError(f"stream {t.stream_id} has no token times")
            for w, (a, b) in zip(t.tokens, t.times):
                f.write(json.dumps({"stream_id": t.stream_id, "start_s": a, "end_s": b, "word": w}) + "\n")
