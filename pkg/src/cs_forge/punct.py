"""Casing and punctuation restoration.

For each word-start position we predict whether the word is capitalized and
which punctuation (none, comma, period) follows it. The restorer is a
counting classifier over a small context window with add-one smoothing;
the synthetic punctuation policy is low-entropy enough for that.
"""

import json
from dataclasses import dataclass, field
from math import log

from .errors import ConfigurationError

PUNCT_NONE = "none"
PUNCT_COMMA = "comma"
PUNCT_PERIOD = "period"
PUNCT_LABELS = (PUNCT_NONE, PUNCT_COMMA, PUNCT_PERIOD)

_PUNCT_CHARS = {",": PUNCT_COMMA, ".": PUNCT_PERIOD}
_PUNCT_SURFACE = {PUNCT_NONE: "", PUNCT_COMMA: ",", PUNCT_PERIOD: "."}

_BOS = "<s>"
_EOS = "</s>"

MIN_TRAIN_SENTENCES = 100


@dataclass(frozen=True)
class PunctLabel:
    capitalize: bool
    following_punct: str  # one of PUNCT_LABELS

    def __post_init__(self):
        if self.following_punct not in PUNCT_LABELS:
            raise ValueError(f"bad punctuation label {self.following_punct!r}")


def strip_case_punct(text):
    """Lowercase and strip punctuation, returning the bare text plus the
    per-word gold labels needed to reconstruct the original."""
    bare_words = []
    labels = []
    for token in text.split():
        punct = PUNCT_NONE
        while token and token[-1] in _PUNCT_CHARS:
            # keep the innermost mark; policy emits at most one anyway
            punct = _PUNCT_CHARS[token[-1]]
            token = token[:-1]
        if not token:
            continue
        labels.append(PunctLabel(token[0].isupper(), punct))
        bare_words.append(token.lower())
    return " ".join(bare_words), labels


def apply_labels(bare_text, labels):
    """Realize labels on a bare word sequence; punctuation attaches left."""
    words = bare_text.split()
    if len(words) != len(labels):
        raise ValueError("label count does not match word count")
    out = []
    for word, label in zip(words, labels):
        if label.capitalize:
            word = word.capitalize()
        out.append(word + _PUNCT_SURFACE[label.following_punct])
    return " ".join(out)


@dataclass
class Restorer:
    """Feature -> label count tables, one block per feature template."""

    cap_counts: dict = field(default_factory=dict)
    punct_counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {"cap": self.cap_counts, "punct": self.punct_counts,
                "meta": self.meta}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["cap"], obj["punct"], obj.get("meta", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _cap_features(words, i, prev_punct):
    return [
        f"first={i == 0}",
        f"prevpunct={prev_punct}",
        f"cur={words[i]}",
    ]


def _punct_features(words, i):
    nxt = words[i + 1] if i + 1 < len(words) else _EOS
    prev = words[i - 1] if i > 0 else _BOS
    return [
        f"last={nxt == _EOS}",
        f"cur={words[i]}",
        f"prev={prev}",
        f"next={nxt}",
        f"first={i == 0}",
    ]


def _bump(table, feature, label):
    block = table.setdefault(feature, {})
    block[label] = block.get(label, 0) + 1


def train_restorer(texts):
    """Fit the counting classifier on cased, punctuated sentences."""
    texts = list(texts)
    if len(texts) < MIN_TRAIN_SENTENCES:
        raise ConfigurationError(
            f"need at least {MIN_TRAIN_SENTENCES} sentences, got {len(texts)}")
    restorer = Restorer(meta={"n_sentences": len(texts)})
    for text in texts:
        bare, labels = strip_case_punct(text)
        words = bare.split()
        prev_punct = _BOS
        for i, label in enumerate(labels):
            cap_label = "cap" if label.capitalize else "low"
            for feat in _cap_features(words, i, prev_punct):
                _bump(restorer.cap_counts, feat, cap_label)
            for feat in _punct_features(words, i):
                _bump(restorer.punct_counts, feat, label.following_punct)
            prev_punct = label.following_punct
    return restorer


def _score(table, features, labels):
    # naive-Bayes style additive log score with add-one smoothing
    scores = {}
    for label in labels:
        total = 0.0
        for feat in features:
            block = table.get(feat, {})
            denom = sum(block.values()) + len(labels)
            total += log((block.get(label, 0) + 1) / denom)
        scores[label] = total
    return scores


def predict_labels(restorer, bare_text):
    """Greedy left-to-right label prediction; ties break toward (low, none)."""
    words = bare_text.split()
    labels = []
    prev_punct = _BOS
    for i in range(len(words)):
        cap_scores = _score(restorer.cap_counts,
                            _cap_features(words, i, prev_punct), ("low", "cap"))
        capitalize = cap_scores["cap"] > cap_scores["low"]
        punct_scores = _score(restorer.punct_counts,
                              _punct_features(words, i), PUNCT_LABELS)
        punct = max(PUNCT_LABELS,
                    key=lambda lab: (punct_scores[lab], lab == PUNCT_NONE))
        labels.append(PunctLabel(capitalize, punct))
        prev_punct = punct
    return labels


def restore(restorer, bare_text):
    """Restore casing and punctuation on bare lowercase text."""
    if not bare_text.strip():
        return ""
    return apply_labels(bare_text, predict_labels(restorer, bare_text))
