"""Synthetic bilingual corpus: two toy languages (SRC/TGT), an invertible
oracle translation, a pseudo-audio synthesizer and manifest generation.

One frame notionally covers 10 ms, i.e. 100 frames per second, so the
20 second utterance cap is exactly 2000 frames.
"""

import json
import random
from dataclasses import dataclass, field

from .errors import ConfigurationError, SynthesisError, VocabularyError

SRC = "SRC"
TGT = "TGT"

FRAMES_PER_SECOND = 100
MAX_FRAMES = 2000

# disjoint per-stream offsets so seed ^ index never collides across streams
_STREAM_ASR = 0
_STREAM_ST = 1 << 32
_STREAM_DEV = 2 << 32
_STREAM_TEST = 3 << 32

GENERATOR_VERSION = "1"


class AcousticAlphabet:
    """Maps the characters of surface forms to integer frame symbols.

    Id 0 is reserved for padding; the word-boundary marker gets its own id.
    """

    PAD_ID = 0

    def __init__(self):
        chars = ["s", "t"] + [str(d) for d in range(10)]
        self.char_to_id = {c: i + 1 for i, c in enumerate(chars)}
        self.boundary_id = len(chars) + 1
        self.num_symbols = self.boundary_id + 1  # including pad

    def id_of(self, char):
        try:
            return self.char_to_id[char]
        except KeyError:
            raise SynthesisError(f"character {char!r} outside acoustic alphabet")

    @property
    def character_ids(self):
        return list(self.char_to_id.values())


ALPHABET = AcousticAlphabet()


@dataclass
class Lexicon:
    """Index-aligned bijective SRC/TGT word lists; one reserved index plays
    the role of the conjunction ("and")."""

    size: int
    src_words: list
    tgt_words: list
    conjunction_index: int

    def __post_init__(self):
        self._src_index = {w: i for i, w in enumerate(self.src_words)}
        self._tgt_index = {w: i for i, w in enumerate(self.tgt_words)}

    @property
    def conjunction_tgt(self):
        return self.tgt_words[self.conjunction_index]

    @property
    def conjunction_src(self):
        return self.src_words[self.conjunction_index]

    def src_index(self, word):
        if word not in self._src_index:
            raise VocabularyError(f"unknown SRC word: {word!r}")
        return self._src_index[word]

    def tgt_index(self, word):
        if word not in self._tgt_index:
            raise VocabularyError(f"unknown TGT word: {word!r}")
        return self._tgt_index[word]

    def to_json(self):
        return {
            "size": self.size,
            "src_words": self.src_words,
            "tgt_words": self.tgt_words,
            "conjunction_index": self.conjunction_index,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            size=obj["size"],
            src_words=list(obj["src_words"]),
            tgt_words=list(obj["tgt_words"]),
            conjunction_index=obj["conjunction_index"],
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class Utterance:
    id: str
    frames: list
    lid_spans: list  # [(start_frame, end_frame, "SRC"|"TGT"), ...]
    transcript: str
    target: str
    kind: str  # asr | st | mixed

    def validate(self, max_frames=MAX_FRAMES):
        n = len(self.frames)
        if n > max_frames:
            raise ValueError(f"{self.id}: {n} frames exceeds cap {max_frames}")
        pos = 0
        for start, end, lang in self.lid_spans:
            if start != pos or end <= start:
                raise ValueError(f"{self.id}: lid_spans not contiguous at {start}")
            if lang not in (SRC, TGT):
                raise ValueError(f"{self.id}: bad language {lang!r}")
            pos = end
        if pos != n:
            raise ValueError(f"{self.id}: lid_spans cover {pos} of {n} frames")
        langs = {lang for _, _, lang in self.lid_spans}
        if (self.kind == "mixed") != (len(langs) >= 2):
            raise ValueError(f"{self.id}: kind {self.kind} inconsistent with spans")

    def to_json(self):
        return {
            "id": self.id,
            "frames": list(self.frames),
            "lid_spans": [[s, e, lang] for s, e, lang in self.lid_spans],
            "transcript": self.transcript,
            "target": self.target,
            "kind": self.kind,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            id=obj["id"],
            frames=list(obj["frames"]),
            lid_spans=[(s, e, lang) for s, e, lang in obj["lid_spans"]],
            transcript=obj["transcript"],
            target=obj["target"],
            kind=obj["kind"],
        )


@dataclass
class Manifest:
    """Ordered, seeded collection of utterances; the universal dataset unit."""

    utterances: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def validate(self, max_frames=MAX_FRAMES):
        seen = set()
        for utt in self.utterances:
            if utt.id in seen:
                raise ValueError(f"duplicate utterance id {utt.id}")
            seen.add(utt.id)
            utt.validate(max_frames=max_frames)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"meta": self.meta}) + "\n")
            for utt in self.utterances:
                f.write(json.dumps(utt.to_json()) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            first = json.loads(f.readline())
            manifest = cls(meta=first.get("meta", {}))
            for line in f:
                line = line.strip()
                if line:
                    manifest.utterances.append(Utterance.from_json(json.loads(line)))
        return manifest


@dataclass
class ParallelSentence:
    """One test sentence kept in both renderings for later CS synthesis."""

    tgt_reference: str  # cased, punctuated TGT text
    tgt_bare: str  # lowercase, unpunctuated TGT words
    src_bare: str  # SRC rendering of tgt_bare via the inverse oracle

    def to_json(self):
        return {
            "tgt_reference": self.tgt_reference,
            "tgt_bare": self.tgt_bare,
            "src_bare": self.src_bare,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tgt_reference"], obj["tgt_bare"], obj["src_bare"])


@dataclass
class ParallelCorpus:
    sentences: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sentences)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"meta": self.meta}) + "\n")
            for sent in self.sentences:
                f.write(json.dumps(sent.to_json()) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            first = json.loads(f.readline())
            corpus = cls(meta=first.get("meta", {}))
            for line in f:
                line = line.strip()
                if line:
                    corpus.sentences.append(ParallelSentence.from_json(json.loads(line)))
        return corpus


def build_lexicon(size, seed):
    """Build the index-aligned toy lexicon; deterministic for (size, seed)."""
    if not 10 <= size <= 1000:
        raise ConfigurationError(f"lexicon size must be in [10, 1000], got {size}")
    rng = random.Random(seed)
    tgt_words = [f"t{i:03d}" for i in range(size)]
    src_words = [f"s{i:03d}" for i in range(size)]
    conjunction_index = rng.randrange(size)
    return Lexicon(size, src_words, tgt_words, conjunction_index)


def translate_oracle(src_text, lexicon):
    """SRC -> TGT: map each word by index, then swap adjacent pairs."""
    words = src_text.split()
    mapped = [lexicon.tgt_words[lexicon.src_index(w)] for w in words]
    return " ".join(_swap_adjacent(mapped))


def inverse_oracle(tgt_text, lexicon):
    """TGT -> SRC: swap adjacent pairs, then map each word by index."""
    words = tgt_text.split()
    swapped = _swap_adjacent(words)
    return " ".join(lexicon.src_words[lexicon.tgt_index(w)] for w in swapped)


def _swap_adjacent(words):
    out = list(words)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def synthesize_audio(words, language, dwell_max=3, noise_prob=0.0, seed=0):
    """Render bare lowercase words as acoustic symbol frames.

    Each character dwells for 1..dwell_max frames; one boundary frame sits
    between words; optional insertion noise after each emitted frame.
    """
    if isinstance(words, str):
        words = words.split()
    if not words:
        raise SynthesisError("cannot synthesize an empty word sequence")
    prefix = "s" if language == SRC else "t"
    rng = random.Random(seed)
    frames = []

    def emit(frame_id):
        frames.append(frame_id)
        if noise_prob > 0 and rng.random() < noise_prob:
            frames.append(rng.choice(ALPHABET.character_ids))

    for w, word in enumerate(words):
        if not word.startswith(prefix):
            raise SynthesisError(f"word {word!r} does not belong to language {language}")
        if w > 0:
            emit(ALPHABET.boundary_id)
        for char in word:
            dwell = rng.randint(1, dwell_max)
            char_id = ALPHABET.id_of(char)
            for _ in range(dwell):
                emit(char_id)
    return frames


def apply_casing_punctuation(words, rng, comma_prob=0.3):
    """Render bare TGT words as a cased, punctuated sentence.

    First word capitalized; with probability comma_prob a comma after a
    uniformly chosen non-final word; terminal full stop.
    """
    tokens = list(words)
    tokens[0] = tokens[0].capitalize()
    if len(tokens) >= 2 and rng.random() < comma_prob:
        pos = rng.randrange(len(tokens) - 1)
        tokens[pos] = tokens[pos] + ","
    tokens[-1] = tokens[-1] + "."
    return " ".join(tokens)


def _word_weights(lexicon):
    # Zipfian over lexicon indices; conjunction frequency boosted x5.
    weights = [1.0 / (i + 1) for i in range(lexicon.size)]
    weights[lexicon.conjunction_index] *= 5.0
    return weights


def sample_sentence(lexicon, rng, sentence_len_range=(3, 12), weights=None):
    """Sample bare TGT words: length uniform in range, words Zipfian."""
    if weights is None:
        weights = _word_weights(lexicon)
    length = rng.randint(sentence_len_range[0], sentence_len_range[1])
    return rng.choices(lexicon.tgt_words, weights=weights, k=length)


def _make_item(lexicon, index, stream, kind, seed, sentence_len_range, dwell_max,
               noise_prob, weights):
    rng = random.Random(seed ^ (stream + index))
    bare = sample_sentence(lexicon, rng, sentence_len_range, weights)
    target = apply_casing_punctuation(bare, rng)
    tgt_bare = " ".join(bare)
    src_bare = inverse_oracle(tgt_bare, lexicon)
    synth_seed = rng.getrandbits(63)
    if kind == "asr":
        frames = synthesize_audio(bare, TGT, dwell_max, noise_prob, synth_seed)
        transcript = tgt_bare
        lang = TGT
    else:
        frames = synthesize_audio(src_bare, SRC, dwell_max, noise_prob, synth_seed)
        transcript = src_bare
        lang = SRC
    utt = Utterance(
        id=f"{kind}-{index:06d}",
        frames=frames,
        lid_spans=[(0, len(frames), lang)],
        transcript=transcript,
        target=target,
        kind=kind,
    )
    return utt, ParallelSentence(target, tgt_bare, src_bare)


def generate_corpus(lexicon, n_asr, n_st, sentence_len_range=(3, 12), seed=0,
                    n_dev=200, n_test_parallel=400, dwell_max=3, noise_prob=0.0):
    """Generate ASR/ST training manifests, a held-out dev manifest and a
    parallel test pool for later CS test synthesis.

    Fully determined by (params, seed); per-utterance streams are derived
    from seed and utterance index so generation order does not matter.
    """
    if n_asr < 0 or n_st < 0 or n_asr + n_st < 1:
        raise ConfigurationError("need at least one training utterance")
    weights = _word_weights(lexicon)
    params = {
        "n_asr": n_asr,
        "n_st": n_st,
        "n_dev": n_dev,
        "n_test_parallel": n_test_parallel,
        "sentence_len_range": list(sentence_len_range),
        "dwell_max": dwell_max,
        "noise_prob": noise_prob,
    }

    def meta(section):
        return {"seed": seed, "generator_version": GENERATOR_VERSION,
                "section": section, "params": params}

    asr = Manifest(meta=meta("asr"))
    for i in range(n_asr):
        utt, _ = _make_item(lexicon, i, _STREAM_ASR, "asr", seed,
                            sentence_len_range, dwell_max, noise_prob, weights)
        asr.utterances.append(utt)

    st = Manifest(meta=meta("st"))
    for i in range(n_st):
        utt, _ = _make_item(lexicon, i, _STREAM_ST, "st", seed,
                            sentence_len_range, dwell_max, noise_prob, weights)
        st.utterances.append(utt)

    dev = Manifest(meta=meta("dev"))
    for i in range(n_dev):
        kind = "asr" if i % 2 == 0 else "st"
        utt, _ = _make_item(lexicon, i, _STREAM_DEV, kind, seed,
                            sentence_len_range, dwell_max, noise_prob, weights)
        utt.id = f"dev-{utt.id}"
        dev.utterances.append(utt)

    test_parallel = ParallelCorpus(meta=meta("test_parallel"))
    for i in range(n_test_parallel):
        _, sent = _make_item(lexicon, i, _STREAM_TEST, "st", seed,
                             sentence_len_range, dwell_max, noise_prob, weights)
        test_parallel.sentences.append(sent)

    return asr, st, dev, test_parallel
