"""Trainable attention encoder-decoder from acoustic frames to TGT text.

Targets use a closed word vocabulary with case carried as a separate
token variant and punctuation marks as standalone tokens, so the model can
make (and be scored on) casing and punctuation mistakes without subwords.

Training follows a linear-warmup / inverse-square-root learning-rate
schedule with Adam, a frame-length cap, one checkpoint per epoch scored by
validation perplexity, and arithmetic averaging of the best checkpoints.
"""

import copy
import logging
import math
import random
from dataclasses import dataclass, field

import torch
from torch import nn

from .corpus import ALPHABET, MAX_FRAMES
from .errors import NumericError, PreconditionError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]
_PUNCT_TOKENS = [",", "."]

CHECKPOINT_FORMAT_VERSION = 1


class TargetVocab:
    """Closed target vocabulary: words, their capitalized variants,
    punctuation marks and the special tokens."""

    def __init__(self, words):
        self.tokens = list(_SPECIALS)
        for w in words:
            self.tokens.append(w)
        for w in words:
            self.tokens.append(w.capitalize())
        self.tokens.extend(_PUNCT_TOKENS)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_lexicon(cls, lexicon):
        return cls(lexicon.tgt_words)

    def tokenize(self, text):
        """Split surface text into vocabulary tokens; trailing punctuation
        characters become their own tokens."""
        out = []
        for token in text.split():
            tail = []
            while token and token[-1] in _PUNCT_TOKENS:
                tail.append(token[-1])
                token = token[:-1]
            if token:
                out.append(token)
            out.extend(reversed(tail))
        return out

    def encode(self, text):
        return [self.index.get(t, UNK) for t in self.tokenize(text)]

    def decode(self, ids):
        """Detokenize ids to surface text; punctuation attaches to the
        previous word with no space, UNK renders literally."""
        pieces = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            token = self.tokens[i] if 0 <= i < len(self.tokens) else "<unk>"
            if token in _PUNCT_TOKENS and pieces:
                pieces[-1] += token
            else:
                pieces.append(token)
        return " ".join(pieces)


@dataclass
class ModelHParams:
    emb_dim: int = 48
    hidden_dim: int = 96
    enc_layers: int = 1
    dec_layers: int = 1
    attn_dim: int = 64
    attn_loc_channels: int = 8
    subsample_layers: int = 2  # each conv halves the frame axis
    audio_tail_frames: int = 4  # silent frames appended inside the encoder
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def to_json(self):
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class TrainConfig:
    max_updates: int = 3000
    tokens_per_update: int = 2000
    peak_lr: float = 1e-3
    warmup_updates: int = 300
    max_frames: int = MAX_FRAMES
    freeze_target_embeddings: bool = False
    seed: int = 0
    epochs_to_average: int = 5
    max_epochs: int = 10_000
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.max_updates > 0 and not self.warmup_updates < self.max_updates:
            raise ValueError("warmup_updates must be below max_updates")
        if self.tokens_per_update <= 0:
            raise ValueError("tokens_per_update must be positive")


@dataclass
class Checkpoint:
    parameters: dict  # state_dict, tensors on CPU
    epoch: int
    perplexity: float
    hparams: ModelHParams = None
    vocab_tokens: list = None


def learning_rate(update, cfg):
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    u = max(1, update)
    if u <= cfg.warmup_updates:
        return cfg.peak_lr * u / cfg.warmup_updates
    return cfg.peak_lr * math.sqrt(cfg.warmup_updates / u)


class Seq2SeqModel(nn.Module):
    """Bidirectional GRU encoder over acoustic symbols, GRU decoder with
    additive content-based attention, projection to the target vocabulary."""

    def __init__(self, hp, vocab):
        super().__init__()
        if hp.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even (bidirectional encoder)")
        self.hp = hp
        self.vocab = vocab
        h = hp.hidden_dim
        self.acoustic_emb = nn.Embedding(ALPHABET.num_symbols, hp.emb_dim,
                                         padding_idx=ALPHABET.PAD_ID)
        self.subsample = nn.ModuleList(
            [nn.Conv1d(hp.emb_dim, hp.emb_dim, kernel_size=5, stride=2,
                       padding=2) for _ in range(hp.subsample_layers)])
        self.encoder = nn.GRU(hp.emb_dim, h // 2, num_layers=hp.enc_layers,
                              bidirectional=True, batch_first=True,
                              dropout=hp.dropout if hp.enc_layers > 1 else 0.0)
        self.target_emb = nn.Embedding(len(vocab), hp.emb_dim, padding_idx=PAD)
        self.dec_cells = nn.ModuleList(
            [nn.GRUCell(hp.emb_dim + h if i == 0 else h, h)
             for i in range(hp.dec_layers)])
        self.attn_enc = nn.Linear(h, hp.attn_dim)
        self.attn_dec = nn.Linear(h, hp.attn_dim, bias=False)
        # location features: previous alignment steers the next one,
        # which keeps the read head moving during free-running decoding
        self.attn_loc_conv = nn.Conv1d(1, hp.attn_loc_channels,
                                       kernel_size=9, padding=4)
        self.attn_loc = nn.Linear(hp.attn_loc_channels, hp.attn_dim, bias=False)
        self.attn_v = nn.Linear(hp.attn_dim, 1, bias=False)
        self.bridge = nn.Linear(h, h)
        self.out_proj = nn.Linear(2 * h, len(vocab))
        self.dropout = nn.Dropout(hp.dropout)

    def encode(self, frames, frame_mask):
        # frames: (B, F) long; frame_mask: (B, F) bool, True on real frames
        lengths = frame_mask.sum(dim=1)
        emb = self.dropout(self.acoustic_emb(frames))
        tail = self.hp.audio_tail_frames
        if tail:
            # give the attention a silent end-of-audio region to land on
            # when emitting terminal punctuation and EOS; appended in
            # embedding space so the pad embedding row stays out of play
            silence = torch.zeros(emb.size(0), tail, emb.size(2),
                                  dtype=emb.dtype, device=emb.device)
            emb = torch.cat([emb, silence], dim=1)
            lengths = lengths + tail
        x = emb.transpose(1, 2)
        for conv in self.subsample:
            x = torch.relu(conv(x))
            lengths = torch.div(lengths + 1, 2, rounding_mode="floor")
        x = x.transpose(1, 2)
        mask = (torch.arange(x.size(1), device=x.device).unsqueeze(0)
                < lengths.unsqueeze(1))
        # pack so the backward direction never runs over padding; the
        # encoding of an utterance is then independent of batch composition
        packed = nn.utils.rnn.pack_padded_sequence(
            self.dropout(x), lengths.cpu(), batch_first=True,
            enforce_sorted=False)
        enc_out, _ = self.encoder(packed)
        enc_out, _ = nn.utils.rnn.pad_packed_sequence(
            enc_out, batch_first=True, total_length=x.size(1))
        last = enc_out[torch.arange(len(lengths)), lengths - 1]
        state0 = torch.tanh(self.bridge(last))
        return enc_out, mask, state0

    def _attend(self, enc_keys, enc_out, frame_mask, state, prev_weights):
        loc = self.attn_loc_conv(prev_weights.unsqueeze(1)).transpose(1, 2)
        scores = self.attn_v(torch.tanh(
            enc_keys + self.attn_dec(state).unsqueeze(1) + self.attn_loc(loc)))
        scores = scores.squeeze(-1).masked_fill(~frame_mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        return torch.bmm(weights.unsqueeze(1), enc_out).squeeze(1), weights

    def forward(self, frames, frame_mask, tgt_in):
        """Teacher-forced logits, shape (B, T, vocab)."""
        enc_out, enc_mask, state0 = self.encode(frames, frame_mask)
        enc_keys = self.attn_enc(enc_out)
        states = [state0.clone() for _ in self.dec_cells]
        emb = self.dropout(self.target_emb(tgt_in))
        weights = torch.zeros_like(enc_mask, dtype=enc_out.dtype)
        logits = []
        for t in range(tgt_in.size(1)):
            context, _ = self._attend(enc_keys, enc_out, enc_mask,
                                      states[-1], weights)
            x = torch.cat([emb[:, t], context], dim=-1)
            for i, cell in enumerate(self.dec_cells):
                states[i] = cell(x, states[i])
                x = self.dropout(states[i])
            # re-attend with the updated state for the output distribution
            context_out, weights = self._attend(enc_keys, enc_out, enc_mask,
                                                states[-1], weights)
            logits.append(self.out_proj(
                torch.cat([states[-1], context_out], dim=-1)))
        return torch.stack(logits, dim=1)


def init_model(hparams, vocab, seed=0):
    """Deterministic initialization from the seed."""
    torch.manual_seed(seed)
    model = Seq2SeqModel(hparams, vocab)
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise NumericError("non-finite parameter at initialization")
    return model


def _pad_batch(utterances, vocab, device=None):
    frames = [torch.tensor(u.frames, dtype=torch.long) for u in utterances]
    targets = [torch.tensor([BOS] + vocab.encode(u.target) + [EOS],
                            dtype=torch.long) for u in utterances]
    f_max = max(len(f) for f in frames)
    t_max = max(len(t) for t in targets)
    b = len(utterances)
    frame_batch = torch.zeros(b, f_max, dtype=torch.long)
    frame_mask = torch.zeros(b, f_max, dtype=torch.bool)
    tgt_batch = torch.full((b, t_max), PAD, dtype=torch.long)
    for i, (f, t) in enumerate(zip(frames, targets)):
        frame_batch[i, :len(f)] = f
        frame_mask[i, :len(f)] = True
        tgt_batch[i, :len(t)] = t
    return frame_batch, frame_mask, tgt_batch[:, :-1], tgt_batch[:, 1:]


def _token_count(utt, vocab):
    return len(vocab.encode(utt.target)) + 1  # EOS included


def _loss(model, batch, label_smoothing):
    frames, frame_mask, tgt_in, tgt_out = batch
    logits = model(frames, frame_mask, tgt_in)
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.size(-1)), tgt_out.reshape(-1),
        ignore_index=PAD, label_smoothing=label_smoothing)


def pack_batches(utterances, vocab, tokens_per_update):
    """Greedily pack utterances (in the given order) until the summed target
    token count would exceed the cap."""
    batches = []
    current = []
    tokens = 0
    for utt in utterances:
        n = _token_count(utt, vocab)
        if current and tokens + n > tokens_per_update:
            batches.append(current)
            current = []
            tokens = 0
        current.append(utt)
        tokens += n
    if current:
        batches.append(current)
    return batches


def perplexity(model, manifest):
    """exp of mean per-token NLL under teacher forcing; EOS included,
    padding excluded."""
    utterances = list(manifest)
    if not utterances:
        raise PreconditionError("perplexity needs a nonempty manifest")
    model.eval()
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for batch_utts in pack_batches(utterances, model.vocab, 4000):
            frames, frame_mask, tgt_in, tgt_out = _pad_batch(batch_utts, model.vocab)
            logits = model(frames, frame_mask, tgt_in)
            nll = nn.functional.cross_entropy(
                logits.reshape(-1, logits.size(-1)), tgt_out.reshape(-1),
                ignore_index=PAD, reduction="sum")
            total_nll += nll.item()
            total_tokens += int((tgt_out != PAD).sum())
    return math.exp(total_nll / total_tokens)


def train(model, manifest, dev_manifest, cfg):
    """Train in place; returns one checkpoint per epoch with dev perplexity.

    Deterministic for a fixed seed (single-threaded execution enforced).
    """
    utterances = [u for u in manifest if len(u.frames) <= cfg.max_frames]
    dropped = len(list(manifest)) - len(utterances)
    if dropped:
        log.info("filtered %d utterances over the %d-frame cap", dropped,
                 cfg.max_frames)
    if not utterances:
        raise PreconditionError("no trainable utterances after length filter")
    if cfg.max_updates == 0:
        return []

    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_loop(model, utterances, dev_manifest, cfg)
    finally:
        torch.set_num_threads(n_threads)


def _train_loop(model, utterances, dev_manifest, cfg):
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    params = []
    for name, p in model.named_parameters():
        if cfg.freeze_target_embeddings and name.startswith("target_emb"):
            p.requires_grad_(False)
        else:
            p.requires_grad_(True)
            params.append(p)
    optimizer = torch.optim.Adam(params, lr=cfg.peak_lr, betas=(0.9, 0.98),
                                 eps=1e-9)
    checkpoints = []
    update = 0
    epoch = 0
    while update < cfg.max_updates and epoch < cfg.max_epochs:
        epoch += 1
        order = list(utterances)
        rng.shuffle(order)
        model.train()
        for batch_utts in pack_batches(order, model.vocab, cfg.tokens_per_update):
            update += 1
            lr = learning_rate(update, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = _loss(model, _pad_batch(batch_utts, model.vocab),
                         model.hp.label_smoothing)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at update {update} (lr={lr:.3e})")
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            if update >= cfg.max_updates:
                break
        ppl = perplexity(model, dev_manifest)
        log.info("epoch %d: update %d, dev ppl %.4f", epoch, update, ppl)
        checkpoints.append(Checkpoint(
            parameters={k: v.detach().clone() for k, v in model.state_dict().items()},
            epoch=epoch,
            perplexity=ppl,
            hparams=model.hp,
            vocab_tokens=list(model.vocab.tokens),
        ))
    return checkpoints


def average_checkpoints(checkpoints, epochs_to_average=5):
    """Arithmetic mean of the parameters of the lowest-perplexity
    checkpoints (all of them if fewer exist)."""
    if not checkpoints:
        raise PreconditionError("need at least one checkpoint")
    chosen = sorted(checkpoints, key=lambda c: (c.perplexity, c.epoch))
    chosen = chosen[:epochs_to_average]
    vocab = TargetVocab.__new__(TargetVocab)
    vocab.tokens = list(chosen[0].vocab_tokens)
    vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
    model = Seq2SeqModel(chosen[0].hparams, vocab)
    averaged = {}
    for key, value in chosen[0].parameters.items():
        if value.is_floating_point():
            stacked = torch.stack([c.parameters[key].double() for c in chosen])
            averaged[key] = stacked.mean(dim=0).to(value.dtype)
        else:
            averaged[key] = value.clone()
    model.load_state_dict(averaged)
    return model


def finetune_da(model, da_manifest, dev_manifest, cfg):
    """Continue training on augmented data, then average checkpoints."""
    if cfg.max_updates == 0:
        return model
    tuned = copy.deepcopy(model)
    checkpoints = train(tuned, da_manifest, dev_manifest, cfg)
    return average_checkpoints(checkpoints, cfg.epochs_to_average)


def decode_greedy(model, frames, max_len=None):
    """Autoregressive argmax decoding from BOS until EOS or max_len."""
    if not len(frames):
        raise PreconditionError("cannot decode empty frames")
    if max_len is None:
        max_len = 4 + 2 * (len(frames) // 5)
    model.eval()
    with torch.no_grad():
        frame_t = torch.tensor(frames, dtype=torch.long).unsqueeze(0)
        frame_mask = torch.ones_like(frame_t, dtype=torch.bool)
        enc_out, enc_mask, state0 = model.encode(frame_t, frame_mask)
        enc_keys = model.attn_enc(enc_out)
        states = [state0.clone() for _ in model.dec_cells]
        token = torch.tensor([BOS])
        out_ids = []
        weights = torch.zeros_like(enc_mask, dtype=enc_out.dtype)
        for _ in range(max_len):
            context, _ = model._attend(enc_keys, enc_out, enc_mask,
                                       states[-1], weights)
            x = torch.cat([model.target_emb(token), context], dim=-1)
            for i, cell in enumerate(model.dec_cells):
                states[i] = cell(x, states[i])
                x = states[i]
            context_out, weights = model._attend(enc_keys, enc_out, enc_mask,
                                                 states[-1], weights)
            logits = model.out_proj(
                torch.cat([states[-1], context_out], dim=-1))
            next_id = int(logits.argmax(dim=-1))
            if next_id == EOS:
                break
            out_ids.append(next_id)
            token = torch.tensor([next_id])
    return model.vocab.decode(out_ids)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def grad_check(model, sample, epsilon=1e-4, n_coords=120, seed=0):
    """Compare analytic gradients against central finite differences on
    randomly chosen parameter coordinates; returns the max relative error.

    The model must be double precision and small (<= 5000 parameters).
    """
    if epsilon <= 0:
        raise PreconditionError("epsilon must be positive")
    if any(p.dtype != torch.float64 for p in model.parameters()):
        raise PreconditionError("grad_check requires a double-precision model")
    if count_parameters(model) > 5000:
        raise PreconditionError("grad_check model must have <= 5000 parameters")
    vocab = model.vocab
    frames, target_text = sample
    utt_batch = _pad_batch_from_raw(frames, target_text, vocab)

    def loss_fn():
        model.eval()
        return _loss(model, utt_batch, 0.0)

    return finite_difference_check(loss_fn, list(model.parameters()), epsilon,
                                   n_coords, seed)


def _pad_batch_from_raw(frames, target_text, vocab):
    frame_t = torch.tensor(frames, dtype=torch.long).unsqueeze(0)
    mask = torch.ones_like(frame_t, dtype=torch.bool)
    tgt = torch.tensor([[BOS] + vocab.encode(target_text) + [EOS]])
    return frame_t, mask, tgt[:, :-1], tgt[:, 1:]


def finite_difference_check(loss_fn, parameters, epsilon, n_coords, seed):
    """Generic central-difference gradient check over flat coordinates."""
    if epsilon <= 0:
        raise PreconditionError("epsilon must be positive")
    for p in parameters:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    loss.backward()
    coords = [(i, j) for i, p in enumerate(parameters) for j in range(p.numel())]
    rng = random.Random(seed)
    if len(coords) > n_coords:
        coords = rng.sample(coords, n_coords)
    max_rel = 0.0
    with torch.no_grad():
        for i, j in coords:
            p = parameters[i]
            flat = p.view(-1)
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + epsilon
            up = float(loss_fn())
            flat[j] = orig - epsilon
            down = float(loss_fn())
            flat[j] = orig
            fd = (up - down) / (2 * epsilon)
            rel = abs(analytic - fd) / max(1e-8, abs(analytic) + abs(fd))
            max_rel = max(max_rel, rel)
    return max_rel


def save_checkpoint(model, path, epoch=0, dev_perplexity=float("nan")):
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hparams": model.hp.to_json(),
        "vocab_tokens": list(model.vocab.tokens),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "epoch": epoch,
        "dev_perplexity": dev_perplexity,
    }, path)


def load_checkpoint(path):
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    vocab = TargetVocab.__new__(TargetVocab)
    vocab.tokens = list(blob["vocab_tokens"])
    vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
    model = Seq2SeqModel(ModelHParams.from_json(blob["hparams"]), vocab)
    model.load_state_dict(blob["state_dict"])
    return model
