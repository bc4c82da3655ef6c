"""Answer normalization, accuracy and BLEU."""

import math
import re
import string
from collections import Counter

from .errors import ContractError

BLEU_EPSILON = 1e-9

_PUNCT = str.maketrans({c: " " for c in string.punctuation})
# first standalone choice letter; an uppercase match wins over a lowercase one
_UPPER_CHOICE = re.compile(r"(?<![A-Za-z0-9])([A-E])(?![A-Za-z0-9])")
_LOWER_CHOICE = re.compile(r"(?<![A-Za-z0-9])([a-e])(?![A-Za-z0-9])")


def normalize_answer(text):
    """Lowercase, replace punctuation with spaces, collapse whitespace."""
    return " ".join(str(text).lower().translate(_PUNCT).split())


def extract_choice(text):
    """Return the chosen option letter (lowercase) or ``None``.

    The first standalone capital A-E is taken; failing that, the first
    standalone lowercase a-e. "The answer is B." -> "b".
    """
    text = str(text)
    m = _UPPER_CHOICE.search(text) or _LOWER_CHOICE.search(text)
    return m.group(1).lower() if m else None


def accuracy(preds, golds, mode="open"):
    if len(preds) != len(golds):
        raise ContractError(f"accuracy: {len(preds)} predictions vs {len(golds)} references")
    if mode not in ("open", "choice"):
        raise ContractError(f"unknown accuracy mode {mode!r}")
    if not preds:
        return 0.0
    if mode == "open":
        hits = sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds))
    else:
        hits = sum(
            (c := extract_choice(p)) is not None and c == extract_choice(g)
            for p, g in zip(preds, golds)
        )
    return hits / len(preds)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c_len, refs):
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def _bleu_stats(candidate, references, max_n):
    cand = normalize_answer(candidate).split()
    refs = [normalize_answer(r).split() for r in references]
    matches, totals = [], []
    for n in range(1, max_n + 1):
        counts = _ngrams(cand, n)
        max_ref = Counter()
        for r in refs:
            for gram, c in _ngrams(r, n).items():
                max_ref[gram] = max(max_ref[gram], c)
        matches.append(sum(min(c, max_ref[g]) for g, c in counts.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), refs)


def _combine(matches, totals, c_len, r_len, eps):
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else eps / max(t, 1)
        log_p += math.log(p)
    log_p /= len(matches)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu(candidate, references, max_n=4, eps=BLEU_EPSILON):
    """Sentence BLEU-``max_n`` of one candidate against its references.

    Modified (clipped) n-gram precisions are combined by geometric mean and
    multiplied by the brevity penalty. A precision with no matches is
    replaced by ``eps / max(total, 1)``. An empty candidate scores 0.
    """
    if not references:
        raise ContractError("bleu needs at least one reference")
    return _combine(*_bleu_stats(candidate, references, max_n), eps)


def corpus_bleu(candidates, references_list, max_n=4, eps=BLEU_EPSILON):
    """Corpus BLEU: n-gram counts and lengths are pooled before combining."""
    if len(candidates) != len(references_list):
        raise ContractError("corpus_bleu: candidates and references differ in length")
    if not candidates:
        return 0.0
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        if not refs:
            raise ContractError("bleu needs at least one reference")
        m, t, c, r = _bleu_stats(cand, refs, max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c_len += c
        r_len += r
    return _combine(matches, totals, c_len, r_len, eps)
