"""Concatenation data augmentation and the code-switching test set builder.

Multi-language utterances are built by concatenating audio and labels of
utterances with different source languages. Selection is by deterministic
quota, not per-utterance coin flips, so a sweep over the multi fraction is
exactly reproducible.
"""

import random
from dataclasses import dataclass, field

from .corpus import (MAX_FRAMES, SRC, TGT, Manifest, Utterance, inverse_oracle,
                     synthesize_audio)
from .errors import BudgetError, ConfigurationError, PreconditionError
from .punct import strip_case_punct

MAX_RETRIES = 100


@dataclass
class DAConfig:
    p_multi: float = 0.15
    switch_dist: dict = field(default_factory=lambda: {1: 0.8, 2: 0.2})
    max_frames: int = MAX_FRAMES
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_multi <= 0.75:
            raise ConfigurationError(
                f"p_multi must be in [0, 0.75], got {self.p_multi}")
        if abs(sum(self.switch_dist.values()) - 1.0) > 1e-9:
            raise ConfigurationError("switch_dist must sum to 1")


@dataclass
class SwitchPointRule:
    """Token cues after which a speaker might switch languages."""

    split_after_chars: tuple = (",", ".")
    conjunction_word: str = None

    def __post_init__(self):
        if not self.split_after_chars and not self.conjunction_word:
            raise ConfigurationError("switch point rule must be nonempty")

    def splits_after(self, token):
        if token and token[-1] in self.split_after_chars:
            return True
        if self.conjunction_word is None:
            return False
        bare = token.rstrip("".join(self.split_after_chars)).lower()
        return bare == self.conjunction_word


def concat_utterances(parts, max_frames=MAX_FRAMES):
    """Concatenate audio, LID spans and labels of several utterances."""
    if len(parts) < 2:
        raise PreconditionError("need at least 2 parts to concatenate")
    total = sum(len(p.frames) for p in parts)
    if total > max_frames:
        raise BudgetError(f"{total} frames exceeds budget {max_frames}")
    langs = {lang for p in parts for _, _, lang in p.lid_spans}
    if len(langs) < 2:
        raise PreconditionError("parts must span at least 2 languages")
    frames = []
    spans = []
    for p in parts:
        offset = len(frames)
        frames.extend(p.frames)
        spans.extend((s + offset, e + offset, lang) for s, e, lang in p.lid_spans)
    return Utterance(
        id="+".join(p.id for p in parts),
        frames=frames,
        lid_spans=spans,
        transcript=" ".join(p.transcript for p in parts),
        target=" ".join(p.target for p in parts),
        kind="mixed",
    )


def _solve_quota(pool_size, p_multi):
    """Find (n_multi, n_three) so that the achieved multi fraction of the
    output equals round(p_multi * output_size) / output_size exactly.

    Two-part utterances consume 2 inputs, three-part ones consume 3, so the
    output size depends on the quota; solve the fixed point by search. The
    three-part count stays within one of the 20% share (remainder to the
    one-switch class).
    """
    if p_multi == 0.0:
        return 0, 0
    best = None
    for n_multi in range(0, pool_size + 1):
        base_three = int(n_multi * 0.2)
        for n_three in (base_three, max(0, base_three - 1),
                        min(n_multi, base_three + 1)):
            n_two = n_multi - n_three
            consumed = 2 * n_two + 3 * n_three
            if consumed > pool_size:
                continue
            out_size = pool_size - consumed + n_multi
            if out_size <= 0:
                continue
            target = round(p_multi * out_size)
            gap = abs(target - n_multi)
            key = (gap, abs(n_three - base_three), abs(n_multi - p_multi * out_size))
            if best is None or key < best[0]:
                best = (key, n_multi, n_three)
            if gap == 0 and n_three == base_three:
                return n_multi, n_three
    if best is None:
        raise ConfigurationError("empty pool")
    return best[1], best[2]


def _draw_parts(asr_pool, st_pool, n_parts, rng, max_frames):
    """Draw alternating-language parts without replacement; retry on budget
    overflow up to MAX_RETRIES, returning None when infeasible."""
    for _ in range(MAX_RETRIES):
        if n_parts == 2:
            need_asr, need_st = 1, 1
        else:
            # 3 parts alternate L-L'-L; pick the doubled language at random
            if rng.random() < 0.5:
                need_asr, need_st = 2, 1
            else:
                need_asr, need_st = 1, 2
        if len(asr_pool) < need_asr or len(st_pool) < need_st:
            return None
        idx_a = rng.sample(range(len(asr_pool)), need_asr)
        idx_s = rng.sample(range(len(st_pool)), need_st)
        parts_a = [asr_pool[i] for i in idx_a]
        parts_s = [st_pool[i] for i in idx_s]
        if need_asr >= need_st:
            order = [parts_a[0], parts_s[0]] + parts_a[1:]
        else:
            order = [parts_s[0], parts_a[0]] + parts_s[1:]
        if n_parts == 2 and rng.random() < 0.5:
            order = order[::-1]
        if sum(len(p.frames) for p in order) <= max_frames:
            for i in sorted(idx_a, reverse=True):
                del asr_pool[i]
            for i in sorted(idx_s, reverse=True):
                del st_pool[i]
            return order
    return None


def apply_da(asr_manifest, st_manifest, cfg):
    """Mix mono utterances with a quota of concatenated multi-language ones."""
    if len(asr_manifest) == 0 or len(st_manifest) == 0:
        raise PreconditionError("both input manifests must be nonempty")
    rng = random.Random(cfg.seed)
    pool_size = len(asr_manifest) + len(st_manifest)
    n_multi, n_three = _solve_quota(pool_size, cfg.p_multi)
    n_two = n_multi - n_three

    asr_pool = list(asr_manifest.utterances)
    st_pool = list(st_manifest.utterances)
    out = []
    skipped = 0
    for kind_parts, count in ((2, n_two), (3, n_three)):
        for _ in range(count):
            parts = _draw_parts(asr_pool, st_pool, kind_parts, rng, cfg.max_frames)
            if parts is None:
                skipped += 1
                continue
            out.append(concat_utterances(parts, cfg.max_frames))
    built_multi = len(out)
    out.extend(asr_pool)
    out.extend(st_pool)
    rng.shuffle(out)

    out_size = len(out)
    achieved = built_multi / out_size if out_size else 0.0
    meta = {
        "seed": cfg.seed,
        "p_multi_requested": cfg.p_multi,
        "p_multi_achieved": achieved,
        "n_multi": built_multi,
        "n_two_part": n_two - min(skipped, n_two),
        "n_three_part": n_three - max(0, skipped - n_two),
        "skipped_combinations": skipped,
        "switch_dist": {str(k): v for k, v in cfg.switch_dist.items()},
        "rounding": "three-part remainder folded into the one-switch class",
        "sampling": "parts drawn without replacement per epoch",
        "max_frames": cfg.max_frames,
    }
    if built_multi != round(cfg.p_multi * out_size):
        meta["quota_note"] = (
            f"requested fraction infeasible; achieved {achieved:.4f}")
    return Manifest(utterances=out, meta=meta)


def split_at_switch_points(target_text, rule):
    """Split text into parts immediately after each comma, full stop or
    conjunction word; delimiters stay attached to the left part."""
    tokens = target_text.split()
    if not tokens:
        raise PreconditionError("cannot split empty text")
    parts = []
    current = []
    for token in tokens:
        current.append(token)
        if rule.splits_after(token):
            parts.append(" ".join(current))
            current = []
    if current:
        parts.append(" ".join(current))
    return parts


def build_cs_testset(test_parallel, lexicon, n_utterances,
                     sentences_per_utterance=(2, 4), seed=0,
                     dwell_max=3, noise_prob=0.0, max_frames=MAX_FRAMES):
    """Build an inter-sentential code-switching test set.

    Each utterance concatenates a few parallel sentences, splits the TGT
    reference at switch points and alternates the spoken language between
    parts; exactly half of the utterances start in SRC (for even counts).
    """
    sentences = test_parallel.sentences
    lo, hi = sentences_per_utterance
    if len(sentences) < hi:
        raise PreconditionError("not enough parallel sentences")
    rule = SwitchPointRule(conjunction_word=lexicon.conjunction_tgt)
    utterances = []
    for i in range(n_utterances):
        rng = random.Random(seed ^ (i + 1))
        start_lang = SRC if i % 2 == 0 else TGT
        utt = _build_cs_utterance(sentences, lexicon, rule, rng, lo, hi,
                                  start_lang, dwell_max, noise_prob, max_frames)
        utt.id = f"cs-{i:05d}"
        utterances.append(utt)
    meta = {
        "seed": seed,
        "n_utterances": n_utterances,
        "sentences_per_utterance": [lo, hi],
        "src_first": sum(1 for i in range(n_utterances) if i % 2 == 0),
        "dwell_max": dwell_max,
        "noise_prob": noise_prob,
        "section": "cs_test",
    }
    return Manifest(utterances=utterances, meta=meta)


def _build_cs_utterance(sentences, lexicon, rule, rng, lo, hi, start_lang,
                        dwell_max, noise_prob, max_frames):
    for _ in range(MAX_RETRIES):
        k = rng.randint(lo, hi)
        picks = rng.sample(range(len(sentences)), k)
        reference = " ".join(sentences[i].tgt_reference for i in picks)
        parts = split_at_switch_points(reference, rule)
        if len(parts) < 2:
            continue
        frames = []
        spans = []
        transcript_parts = []
        lang = start_lang
        ok = True
        for part in parts:
            bare, _ = strip_case_punct(part)
            if not bare:
                ok = False
                break
            if lang == TGT:
                spoken = bare
            else:
                spoken = inverse_oracle(bare, lexicon)
            part_frames = synthesize_audio(spoken, lang, dwell_max, noise_prob,
                                           rng.getrandbits(63))
            start = len(frames)
            frames.extend(part_frames)
            spans.append((start, len(frames), lang))
            transcript_parts.append(spoken)
            lang = TGT if lang == SRC else SRC
        if not ok or len(frames) > max_frames:
            continue
        return Utterance(
            id="pending",
            frames=frames,
            lid_spans=spans,
            transcript=" ".join(transcript_parts),
            target=reference,
            kind="mixed",
        )
    raise BudgetError("could not build a CS utterance within the frame budget")
