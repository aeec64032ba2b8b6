import math

import pytest
import torch

from cs_forge.corpus import (MAX_FRAMES, TGT, build_lexicon, generate_corpus,
                             synthesize_audio)
from cs_forge.errors import NumericError, PreconditionError
from cs_forge.model import (EOS, PAD, Checkpoint, ModelHParams, TargetVocab,
                            TrainConfig, average_checkpoints, count_parameters,
                            decode_greedy, finetune_da,
                            finite_difference_check, grad_check, init_model,
                            learning_rate, load_checkpoint, pack_batches,
                            perplexity, save_checkpoint, train)


def tiny_hparams(**overrides):
    hp = ModelHParams(emb_dim=8, hidden_dim=16, attn_dim=8,
                      attn_loc_channels=2, subsample_layers=0,
                      dropout=0.0, label_smoothing=0.0)
    for k, v in overrides.items():
        setattr(hp, k, v)
    return hp


@pytest.fixture(scope="module")
def lexicon():
    return build_lexicon(20, seed=4)


@pytest.fixture(scope="module")
def vocab(lexicon):
    return TargetVocab.from_lexicon(lexicon)


class TestTargetVocab:
    def test_size(self, vocab, lexicon):
        # specials + lowercase words + capitalized variants + two marks
        assert len(vocab) == 4 + 2 * lexicon.size + 2

    def test_tokenize_splits_trailing_punct(self, vocab):
        assert vocab.tokenize("T005 t012, t007.") == \
            ["T005", "t012", ",", "t007", "."]

    def test_encode_decode_round_trip(self, vocab):
        text = "T005 t012, t007."
        assert vocab.decode(vocab.encode(text)) == text

    def test_unknown_word_is_unk(self, vocab):
        ids = vocab.encode("zzz t001")
        assert vocab.tokens[ids[0]] == "<unk>"

    def test_decode_skips_specials(self, vocab):
        ids = [PAD, EOS] + vocab.encode("t001.")
        assert vocab.decode(ids) == "t001."


class TestLearningRate:
    def test_linear_warmup(self):
        cfg = TrainConfig(max_updates=100, warmup_updates=10, peak_lr=1e-3)
        assert learning_rate(5, cfg) == pytest.approx(5e-4)
        assert learning_rate(10, cfg) == pytest.approx(1e-3)

    def test_inverse_sqrt_decay(self):
        cfg = TrainConfig(max_updates=100, warmup_updates=10, peak_lr=1e-3)
        assert learning_rate(40, cfg) == pytest.approx(1e-3 * 0.5)
        assert learning_rate(90, cfg) == pytest.approx(1e-3 / 3)

    def test_warmup_must_precede_max(self):
        with pytest.raises(ValueError):
            TrainConfig(max_updates=100, warmup_updates=100)


class TestInitModel:
    def test_deterministic(self, vocab):
        a = init_model(tiny_hparams(), vocab, seed=7)
        b = init_model(tiny_hparams(), vocab, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_weights(self, vocab):
        a = init_model(tiny_hparams(), vocab, seed=7)
        b = init_model(tiny_hparams(), vocab, seed=8)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_forward_shape(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        frames = torch.randint(1, 5, (2, 30))
        mask = torch.ones(2, 30, dtype=torch.bool)
        tgt_in = torch.randint(0, len(vocab), (2, 5))
        assert model(frames, mask, tgt_in).shape == (2, 5, len(vocab))

    def test_odd_hidden_dim_rejected(self, vocab):
        with pytest.raises(ValueError):
            init_model(tiny_hparams(hidden_dim=15), vocab)


class TestPackBatches:
    def test_respects_token_cap(self, lexicon, vocab):
        asr, _, _, _ = generate_corpus(lexicon, 40, 0, seed=1, n_dev=0,
                                       n_test_parallel=0)
        batches = pack_batches(list(asr), vocab, 30)
        assert [u.id for b in batches for u in b] == [u.id for u in asr]
        for batch in batches[:-1]:
            assert sum(len(vocab.encode(u.target)) + 1 for u in batch) <= 30

    def test_oversized_item_gets_own_batch(self, lexicon, vocab):
        asr, _, _, _ = generate_corpus(lexicon, 3, 0, seed=1, n_dev=0,
                                       n_test_parallel=0)
        batches = pack_batches(list(asr), vocab, 1)
        assert [len(b) for b in batches] == [1, 1, 1]


class TestPerplexity:
    def test_uniform_logits_give_vocab_size(self, lexicon, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        with torch.no_grad():
            model.out_proj.weight.zero_()
            model.out_proj.bias.zero_()
        asr, _, _, _ = generate_corpus(lexicon, 5, 0, seed=2, n_dev=0,
                                       n_test_parallel=0)
        assert perplexity(model, asr) == pytest.approx(len(vocab), rel=1e-6)

    def test_matches_per_utterance_oracle(self, lexicon, vocab):
        # independent computation: one utterance at a time, manual NLL sum
        model = init_model(tiny_hparams(), vocab, seed=3)
        asr, _, _, _ = generate_corpus(lexicon, 6, 0, seed=2, n_dev=0,
                                       n_test_parallel=0)
        total_nll = 0.0
        total_tokens = 0
        model.eval()
        with torch.no_grad():
            for utt in asr:
                frames = torch.tensor(utt.frames).unsqueeze(0)
                mask = torch.ones_like(frames, dtype=torch.bool)
                from cs_forge.model import BOS
                ids = [BOS] + vocab.encode(utt.target) + [EOS]
                tgt = torch.tensor([ids])
                logits = model(frames, mask, tgt[:, :-1])
                logp = torch.log_softmax(logits, dim=-1)
                for t, y in enumerate(ids[1:]):
                    total_nll -= float(logp[0, t, y])
                    total_tokens += 1
        expected = math.exp(total_nll / total_tokens)
        # batched vs per-utterance float32 evaluation differs only in
        # accumulation order
        assert perplexity(model, asr) == pytest.approx(expected, rel=1e-5)

    def test_empty_manifest_rejected(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        with pytest.raises(PreconditionError):
            perplexity(model, [])


class TestAverageCheckpoints:
    def _checkpoint(self, model, scale, epoch, ppl):
        params = {k: (v * scale if v.is_floating_point() else v.clone())
                  for k, v in model.state_dict().items()}
        return Checkpoint(parameters=params, epoch=epoch, perplexity=ppl,
                          hparams=model.hp, vocab_tokens=list(model.vocab.tokens))

    def test_mean_of_two(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=1)
        ckpts = [self._checkpoint(model, 0.2, 1, 5.0),
                 self._checkpoint(model, 0.4, 2, 4.0)]
        avg = average_checkpoints(ckpts, epochs_to_average=5)
        base = model.state_dict()
        for k, v in avg.state_dict().items():
            if v.is_floating_point():
                assert torch.allclose(v, base[k] * 0.3, atol=1e-6)

    def test_selects_lowest_perplexity(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=1)
        ppls = [9.0, 3.0, 5.0, 2.0, 8.0, 4.0, 6.0]
        ckpts = [self._checkpoint(model, float(i + 1), i + 1, p)
                 for i, p in enumerate(ppls)]
        avg = average_checkpoints(ckpts, epochs_to_average=5)
        # epochs with the 5 lowest ppls are {2, 3, 4, 6, 7}: mean scale 4.4
        base = model.state_dict()
        for k, v in avg.state_dict().items():
            if v.is_floating_point():
                assert torch.allclose(v, base[k] * 4.4, atol=1e-5)

    def test_single_checkpoint_identity(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=1)
        avg = average_checkpoints([self._checkpoint(model, 1.0, 1, 2.0)])
        for k, v in avg.state_dict().items():
            assert torch.allclose(v.float(), model.state_dict()[k].float())

    def test_empty_rejected(self):
        with pytest.raises(PreconditionError):
            average_checkpoints([])


class TestGradCheck:
    def test_linear_model_closed_form(self):
        # loss = w^2 / 2, so d loss / d w = w exactly
        w = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        err = finite_difference_check(lambda: (w ** 2).sum() / 2, [w],
                                      epsilon=1e-5, n_coords=1, seed=0)
        assert err < 1e-7

    def test_epsilon_must_be_positive(self):
        w = torch.tensor([1.0], dtype=torch.float64)
        with pytest.raises(PreconditionError):
            finite_difference_check(lambda: (w ** 2).sum(), [w], epsilon=0.0,
                                    n_coords=1, seed=0)

    def test_seq2seq_gradients_match(self, lexicon):
        small = build_lexicon(10, seed=1)
        vocab = TargetVocab.from_lexicon(small)
        # smooth configuration (no ReLU subsampling convs), as finite
        # differences are only trustworthy away from kinks
        hp = ModelHParams(emb_dim=4, hidden_dim=6, attn_dim=4,
                          attn_loc_channels=2, subsample_layers=0,
                          dropout=0.0, label_smoothing=0.0)
        model = init_model(hp, vocab, seed=0).double()
        assert count_parameters(model) <= 5000
        frames = synthesize_audio("t001 t002", TGT, dwell_max=2, seed=3)
        err = grad_check(model, (frames, "T001 t002."), n_coords=120, seed=0)
        assert err < 1e-4

    def test_requires_double_precision(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        frames = synthesize_audio("t001", TGT, dwell_max=1, seed=0)
        with pytest.raises(PreconditionError):
            grad_check(model, (frames, "T001."))


class TestTrain:
    def test_max_updates_zero_yields_no_checkpoints(self, lexicon, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        asr, _, dev, _ = generate_corpus(lexicon, 5, 0, seed=2, n_dev=2,
                                         n_test_parallel=0)
        cfg = TrainConfig(max_updates=0, warmup_updates=0,
                          tokens_per_update=100)
        assert train(model, asr, dev, cfg) == []

    def test_length_filter_leaves_nothing(self, lexicon, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        asr, _, dev, _ = generate_corpus(lexicon, 3, 0, seed=2, n_dev=2,
                                         n_test_parallel=0)
        cfg = TrainConfig(max_updates=5, warmup_updates=1,
                          tokens_per_update=100, max_frames=1)
        with pytest.raises(PreconditionError):
            train(model, asr, dev, cfg)

    def test_deterministic(self, lexicon, vocab):
        asr, _, dev, _ = generate_corpus(lexicon, 10, 0, seed=2, n_dev=4,
                                         n_test_parallel=0)
        dev_asr = [u for u in dev if u.kind == "asr"]
        cfg = TrainConfig(max_updates=4, warmup_updates=2,
                          tokens_per_update=60, seed=5)
        runs = []
        for _ in range(2):
            model = init_model(tiny_hparams(), vocab, seed=0)
            ckpts = train(model, asr, dev_asr, cfg)
            runs.append((ckpts[-1].perplexity,
                         {k: v.clone() for k, v in model.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert torch.equal(runs[0][1][k], runs[1][1][k])

    def test_finetune_zero_updates_is_identity(self, lexicon, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        asr, _, dev, _ = generate_corpus(lexicon, 5, 0, seed=2, n_dev=2,
                                         n_test_parallel=0)
        cfg = TrainConfig(max_updates=0, warmup_updates=0,
                          tokens_per_update=100)
        assert finetune_da(model, asr, dev, cfg) is model

    def test_copy_task_converges(self):
        # oracle configuration known to fit the ASR mapping: dwell-1 audio,
        # two encoder layers, no subsampling
        lex = build_lexicon(30, seed=11)
        vocab = TargetVocab.from_lexicon(lex)
        asr, _, dev, _ = generate_corpus(lex, 300, 0, seed=11, n_dev=40,
                                         n_test_parallel=0, dwell_max=1,
                                         sentence_len_range=(3, 8))
        dev_asr = [u for u in dev if u.kind == "asr"]
        hp = ModelHParams(subsample_layers=0, enc_layers=2,
                          dropout=0.1, label_smoothing=0.0)
        model = init_model(hp, vocab, seed=11)
        cfg = TrainConfig(max_updates=500, warmup_updates=100,
                          tokens_per_update=300, peak_lr=3e-3, seed=11)
        ckpts = train(model, asr, dev_asr, cfg)
        best = min(c.perplexity for c in ckpts)
        assert best < 1.5, f"copy task stuck at dev ppl {best:.3f}"


class TestDecodeGreedy:
    def test_deterministic(self, lexicon, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        frames = synthesize_audio("t001 t002", TGT, dwell_max=1, seed=0)
        assert decode_greedy(model, frames) == decode_greedy(model, frames)

    def test_empty_frames_rejected(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        with pytest.raises(PreconditionError):
            decode_greedy(model, [])

    def test_respects_max_len(self, vocab):
        model = init_model(tiny_hparams(), vocab, seed=0)
        frames = synthesize_audio("t001 t002 t003", TGT, dwell_max=1, seed=0)
        out = decode_greedy(model, frames, max_len=2)
        assert len(out.split()) <= 2


class TestCheckpointIO:
    def test_round_trip(self, vocab, tmp_path):
        model = init_model(tiny_hparams(), vocab, seed=6)
        path = tmp_path / "model.pt"
        save_checkpoint(model, path, epoch=3, dev_perplexity=1.25)
        loaded = load_checkpoint(path)
        assert loaded.vocab.tokens == vocab.tokens
        for k, v in loaded.state_dict().items():
            assert torch.equal(v, model.state_dict()[k])

    def test_decodes_identically_after_reload(self, vocab, tmp_path):
        model = init_model(tiny_hparams(), vocab, seed=6)
        path = tmp_path / "model.pt"
        save_checkpoint(model, path)
        frames = synthesize_audio("t004 t005", TGT, dwell_max=1, seed=1)
        assert decode_greedy(load_checkpoint(path), frames) == \
            decode_greedy(model, frames)

    def test_bad_format_version_rejected(self, vocab, tmp_path):
        path = tmp_path / "model.pt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
