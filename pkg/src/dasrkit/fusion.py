"""N-best compaction into confusion networks, ROVER voting and WER scoring.

Alignment here is purely textual; CTM times are synthesised from word
positions and ignored when reading.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

EPS = "<eps>"


@dataclass(frozen=True)
class NBestList:
    utt_id: str
    hypotheses: tuple        # of (tokens tuple, score)

    def __post_init__(self):
        hyps = tuple((tuple(t), float(s)) for t, s in self.hypotheses)
        if not hyps:
            raise ValueError(f"{self.utt_id}: N-best list needs at least one hypothesis")
        for tokens, score in hyps:
            for tok in tokens:
                if not tok or any(c.isspace() for c in tok):
                    raise ValueError(f"{self.utt_id}: invalid token {tok!r}")
            if math.isnan(score):
                raise ValueError(f"{self.utt_id}: NaN score")
        object.__setattr__(self, "hypotheses", hyps)

    @property
    def tokens(self):
        return [t for t, _ in self.hypotheses]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.hypotheses])


@dataclass(frozen=True)
class ConfusionNetwork:
    """Ordered slots mapping word (or ``EPS``) to confidence, plus the pivot word per slot."""

    slots: tuple
    pivot: tuple

    def __post_init__(self):
        if len(self.slots) != len(self.pivot):
            raise ValueError("every slot needs a pivot entry")

    def __len__(self):
        return len(self.slots)

    def best_path(self):
        return [max(slot.items(), key=lambda kv: kv[1])[0] for slot in self.slots]


@dataclass(frozen=True)
class CtmRecord:
    utt_id: str
    word_index: int
    token: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0 + 1e-12:
            raise ValueError(f"{self.utt_id}: confidence {self.confidence} outside [0, 1]")
        if not self.token or any(c.isspace() for c in self.token):
            raise ValueError(f"{self.utt_id}: invalid token {self.token!r}")


@dataclass(frozen=True)
class RoverConfig:
    alpha: float = 0.8
    null_conf: float = 0.4

    def __post_init__(self):
        for name in ("alpha", "null_conf"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / max(self.ref_length, 1)


def posteriors_from_scores(n: NBestList, temperature: float = 1.0,
                           scores_are_probs: bool = False) -> np.ndarray:
    """Hypothesis posteriors: softmax of ``score / T``, or the given probabilities renormalised."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scores = n.scores
    if scores_are_probs:
        if np.any(scores < 0) or scores.sum() <= 0:
            raise ValueError(f"{n.utt_id}: probabilities must be non-negative with positive sum")
        return scores / scores.sum()
    return softmax(scores / temperature)


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------

def _edit_alignment(ref, hyp, match):
    """Minimal-cost alignment of ``hyp`` onto ``ref`` with unit sub/ins/del costs.

    ``match(i, j)`` says whether ``ref[i]`` accepts ``hyp[j]`` at zero cost.
    Backtracking prefers the diagonal, then deletion, then insertion.

    :return: list of ``(i, j)`` pairs with ``None`` marking a gap
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (0 if match(i - 1, j - 1) else 1)
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    path = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (0 if match(i - 1, j - 1) else 1):
            path.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            path.append((i - 1, None))
            i -= 1
        else:
            path.append((None, j - 1))
            j -= 1
    return path[::-1]


def hystoc_confusion_network(hyps, posteriors) -> ConfusionNetwork:
    """Confusion network from hypotheses aligned against the highest-posterior one.

    Each hypothesis adds its posterior to the word it aligns to in every slot,
    or to ``EPS`` where it has none.  Words inserted relative to the pivot open
    new slots keyed by the pivot gap and their order inside it, so two
    hypotheses inserting in the same gap share slots.

    :param hyps: token sequences
    :param posteriors: one weight per hypothesis; slot masses sum to their total
    """
    hyps = [tuple(h) for h in hyps]
    post = np.asarray(posteriors, dtype=np.float64)
    if not hyps:
        raise ValueError("need at least one hypothesis")
    if post.shape != (len(hyps),):
        raise ValueError(f"{len(hyps)} hypotheses but {post.size} posteriors")
    pivot_idx = int(np.argmax(post))
    pivot = hyps[pivot_idx]
    n = len(pivot)
    # per hypothesis: word per pivot slot, and inserted words per (gap, k)
    aligned = []
    gap_width = [0] * (n + 1)
    for h in hyps:
        own = [EPS] * n
        ins = {}
        gap, k = 0, 0
        for i, j in _edit_alignment(pivot, h, lambda a, b: pivot[a] == h[b]):
            if i is None:
                ins[(gap, k)] = h[j]
                k += 1
                gap_width[gap] = max(gap_width[gap], k)
            else:
                if j is not None:
                    own[i] = h[j]
                gap, k = i + 1, 0
        aligned.append((own, ins))
    keys = []
    for g in range(n + 1):
        keys.extend(("ins", g, k) for k in range(gap_width[g]))
        if g < n:
            keys.append(("piv", g))
    mass = {key: {} for key in keys}
    for (own, ins), p in zip(aligned, post):
        for key in keys:
            word = own[key[1]] if key[0] == "piv" else ins.get(key[1:], EPS)
            mass[key].setdefault(word, []).append(p)
    slots = tuple({w: math.fsum(ps) for w, ps in mass[key].items()} for key in keys)
    pivots = tuple(pivot[key[1]] if key[0] == "piv" else EPS for key in keys)
    return ConfusionNetwork(slots, pivots)


def cn_to_ctm(cn: ConfusionNetwork, utt_id: str) -> list:
    """One record per slot whose pivot word is not epsilon, carrying that word's confidence."""
    out = []
    for slot, word in zip(cn.slots, cn.pivot):
        if word == EPS:
            continue
        out.append(CtmRecord(utt_id, len(out), word, min(1.0, slot[word])))
    return out


def rover(inputs, cfg: RoverConfig = RoverConfig()):
    """Fuse ordered systems of ``(token, confidence)`` sequences by word transition network voting.

    Systems are merged one at a time into the network: a slot accepts a word
    at zero cost when it already contains it.  Each slot then votes
    ``alpha * N_w / N_sys + (1 - alpha) * conf_w`` with ``conf_w`` the largest
    confidence of ``w`` in the slot and ``null_conf`` for epsilon.  Ties go to
    the word seen first in system order.

    :return: list of ``(token, confidence)``; epsilon winners are dropped
    """
    inputs = [[(str(t), float(c)) for t, c in sys_] for sys_ in inputs]
    if not inputs:
        raise ValueError("rover needs at least one input system")
    slots = [[entry] for entry in inputs[0]]
    for num_prev, seq in enumerate(inputs[1:], start=1):
        words = [{w for w, _ in slot} for slot in slots]
        path = _edit_alignment(slots, seq, lambda i, j: seq[j][0] in words[i])
        merged = []
        for i, j in path:
            if i is None:
                merged.append([(EPS, cfg.null_conf)] * num_prev + [seq[j]])
            else:
                merged.append(slots[i] + [seq[j] if j is not None else (EPS, cfg.null_conf)])
        slots = merged
    n_sys = len(inputs)
    out = []
    for slot in slots:
        stats = OrderedDict()
        for w, c in slot:
            count, best = stats.get(w, (0, -math.inf))
            stats[w] = (count + 1, max(best, c))
        scored = []
        for w, (count, best) in stats.items():
            conf = cfg.null_conf if w == EPS else best
            scored.append((cfg.alpha * count / n_sys + (1 - cfg.alpha) * conf, w, best))
        top = max(s for s, _, _ in scored)
        _, word, best = next(x for x in scored if x[0] >= top - 1e-12)
        if word != EPS:
            out.append((word, best))
    return out


def wer(ref, hyp) -> WerReport:
    """Word error counts from a minimal-edit alignment.

    Among minimal alignments the one with most substitutions is taken, which
    makes the counts symmetric: swapping ``ref`` and ``hyp`` swaps I and D.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # lexicographic (edits, -substitutions)
    cost = np.zeros((n + 1, m + 1, 2), dtype=np.int64)
    cost[:, 0, 0] = np.arange(n + 1)
    cost[0, :, 0] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = ref[i - 1] != hyp[j - 1]
            cands = (
                (cost[i - 1, j - 1, 0] + sub, cost[i - 1, j - 1, 1] - sub),
                (cost[i - 1, j, 0] + 1, cost[i - 1, j, 1]),
                (cost[i, j - 1, 0] + 1, cost[i, j - 1, 1]),
            )
            cost[i, j] = min(cands)
    edits, neg_subs = (int(v) for v in cost[n, m])
    subs = -neg_subs
    # I - D = m - n and I + D = edits - S
    ins = (edits - subs + m - n) // 2
    dels = edits - subs - ins
    return WerReport(subs, dels, ins, n)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def read_nbest(path) -> list:
    """``utt_id<TAB>score<TAB>tokens`` lines, grouped per utterance in first-seen order."""
    groups = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>score<TAB>tokens")
            try:
                score = float(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad score {parts[1]!r}") from None
            tokens = tuple(parts[2].split()) if len(parts) == 3 else ()
            groups.setdefault(parts[0], []).append((tokens, score))
    return [NBestList(u, tuple(h)) for u, h in groups.items()]


def format_ctm(records) -> str:
    return "".join(f"{r.utt_id} 1 {r.word_index:.2f} 1.00 {r.token} {r.confidence:.6f}\n"
                   for r in records)


def write_ctm(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_ctm(records))


def parse_ctm(text: str, name: str = "<ctm>") -> "OrderedDict[str, list]":
    """CTM lines grouped per utterance in first-seen order, each group sorted by start time."""
    groups = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith(";;"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise ValueError(f"{name}:{lineno}: expected utt_id channel start dur token [conf]")
        conf = float(parts[5]) if len(parts) > 5 else 1.0
        groups.setdefault(parts[0], []).append((float(parts[2]), parts[4], conf))
    out = OrderedDict()
    for utt, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        out[utt] = [CtmRecord(utt, k, tok, conf) for k, (_, tok, conf) in enumerate(rows)]
    return out


def read_ctm(path):
    with open(path, encoding="utf-8") as fh:
        return parse_ctm(fh.read(), str(path))


def read_trn(path) -> "OrderedDict[str, list]":
    out = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if not line.endswith(")") or "(" not in line:
                raise ValueError(f"{path}:{lineno}: TRN line must end with (utt_id)")
            text, utt = line[:-1].rsplit("(", 1)
            out[utt.strip()] = text.split()
    return out


def write_trn(path, transcripts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, tokens in transcripts.items():
            fh.write(f"{' '.join(tokens)} ({utt})\n".lstrip())


@dataclass
class CorpusScore:
    reports: dict = field(default_factory=dict)

    def total(self) -> WerReport:
        r = list(self.reports.values())
        return WerReport(sum(x.substitutions for x in r), sum(x.deletions for x in r),
                         sum(x.insertions for x in r), sum(x.ref_length for x in r))


def score_transcripts(ref: dict, hyp: dict) -> CorpusScore:
    """Per-utterance WER over the reference utterances; a missing hypothesis counts as empty."""
    return CorpusScore({u: wer(tokens, hyp.get(u, [])) for u, tokens in ref.items()})
