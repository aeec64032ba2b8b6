"""Decoding strategies: oracle-LID segmented baselines and direct unified
decoding.

The baseline splits the audio at the human-annotated LID spans, routes
each segment to the matching specialist model, and joins the outputs with
a single space; no punctuation repair is attempted at the joins.
"""

import json
from dataclasses import dataclass, field

from .corpus import TGT
from .model import decode_greedy


@dataclass
class SegmentRouting:
    """Per-segment decode trace of a pipeline run."""

    segments: list = field(default_factory=list)  # (n_frames, language, system)
    texts: list = field(default_factory=list)


def segment_by_lid(utterance):
    """One (frames, language) slice per LID span."""
    return [(utterance.frames[start:end], lang)
            for start, end, lang in utterance.lid_spans]


def pipeline_decode(utterance, asr_model, st_model, routing=None):
    """Route TGT segments to the ASR model and SRC segments to the ST model;
    concatenate the outputs with single spaces."""
    texts = []
    for frames, lang in segment_by_lid(utterance):
        if lang == TGT:
            system, model = "ASR", asr_model
        else:
            system, model = "ST", st_model
        text = decode_greedy(model, frames)
        texts.append(text)
        if routing is not None:
            routing.segments.append((len(frames), lang, system))
            routing.texts.append(text)
    return " ".join(texts)


def given_lid_decode(utterance, last_model):
    """Oracle-LID segmentation, but every segment goes to the one unified
    model."""
    texts = [decode_greedy(last_model, frames)
             for frames, _ in segment_by_lid(utterance)]
    return " ".join(texts)


def last_decode(utterance, last_model):
    """Direct unified decoding of the whole frame sequence; no segmentation
    and no LID input."""
    return decode_greedy(last_model, utterance.frames)


def write_decodes(path, system, pairs):
    """Persist decodes as JSONL records {"id", "system", "hypothesis"}."""
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyp in pairs:
            f.write(json.dumps({"id": utt_id, "system": system,
                                "hypothesis": hyp}) + "\n")


def read_decodes(path):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                obj = json.loads(line)
                pairs.append((obj["id"], obj["hypothesis"]))
    return pairs
