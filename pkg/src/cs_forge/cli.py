"""`cs-forge` command line: corpus synthesis, augmentation, training,
decoding and evaluation driven by one experiment config.

Every artifact is written next to a `.echo.json` file holding the hash of
the producing configuration; a step whose artifact and echo both match is
skipped, which makes `reproduce` resumable.
"""

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import augment as augment_mod
from . import punct as punct_mod
from .augment import DAConfig, apply_da, build_cs_testset
from .corpus import (Lexicon, Manifest, ParallelCorpus, build_lexicon,
                     generate_corpus, synthesize_audio, SRC, TGT)
from .errors import (ConfigurationError, CsForgeError, MissingArtifactError,
                     NumericError)
from .evaluate import evaluate_suite, EvalReport
from .model import (ModelHParams, TargetVocab, TrainConfig, average_checkpoints,
                    decode_greedy, finetune_da, grad_check, init_model,
                    load_checkpoint, save_checkpoint, train)
from .pipeline import given_lid_decode, last_decode, pipeline_decode, write_decodes

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 13,
    "output_dir": "runs/default",
    "corpus": {
        "lexicon_size": 50,
        "n_asr": 1000,
        "n_st": 1000,
        "n_dev": 120,
        "n_test_parallel": 400,
        "sentence_len_range": [3, 12],
        "dwell_max": 1,
        "noise_prob": 0.0,
    },
    "model": {
        "emb_dim": 48,
        "hidden_dim": 96,
        "enc_layers": 2,
        "dec_layers": 1,
        "attn_dim": 64,
        "subsample_layers": 0,
        "dropout": 0.1,
        "label_smoothing": 0.0,
    },
    "train": {
        "max_updates": 1200,
        "tokens_per_update": 600,
        "peak_lr": 1.5e-3,
        "warmup_updates": 200,
        "max_frames": 2000,
        "freeze_target_embeddings": False,
        "epochs_to_average": 5,
    },
    "finetune": {
        "max_updates": 500,
        "warmup_updates": 100,
        "peak_lr": 1e-3,
    },
    "augment": {
        "sweep": [0.4, 0.75],
        "max_frames": 2000,
    },
    "testset": {
        "n_utterances": 120,
        "sentences_per_utterance": [2, 4],
        "n_mono_test": 150,
    },
    "systems": ["ASR", "ST", "LAST", "LAST_half"],
    "eval": {
        "bleu_no_punct": ["cs"],
    },
}


def load_config(path, overrides=None):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    _deep_update(cfg, user)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    _validate_config(cfg)
    cfg["_base_dir"] = str(path.resolve().parent)
    return cfg


def _deep_update(base, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _validate_config(cfg):
    corpus = cfg["corpus"]
    if corpus["n_asr"] + corpus["n_st"] < 1:
        raise ConfigurationError("corpus.n_asr + corpus.n_st must be >= 1")
    if not 10 <= corpus["lexicon_size"] <= 1000:
        raise ConfigurationError("corpus.lexicon_size must be in [10, 1000]")
    for p in cfg["augment"]["sweep"]:
        if not 0.0 <= p <= 0.75:
            raise ConfigurationError(
                f"augment.sweep values must be in [0, 0.75], got {p}")
    lo, hi = cfg["testset"]["sentences_per_utterance"]
    if not 2 <= lo <= hi:
        raise ConfigurationError("testset.sentences_per_utterance must be >= 2")


def out_dir(cfg):
    d = Path(cfg["_base_dir"]) / cfg["output_dir"]
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config_hash(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _step_fresh(path, echo):
    echo_path = Path(str(path) + ".echo.json")
    if not Path(path).exists() or not echo_path.exists():
        return False
    with open(echo_path, encoding="utf-8") as f:
        return json.load(f).get("hash") == _config_hash(echo)


def _write_echo(path, echo):
    with open(str(path) + ".echo.json", "w", encoding="utf-8") as f:
        json.dump({"hash": _config_hash(echo), "config": echo}, f, indent=2,
                  sort_keys=True)


def _require(path, what):
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {what}: {path} (run the producing step first)")
    return path


def _train_config(cfg, section="train", seed_offset=0):
    merged = dict(cfg["train"])
    if section != "train":
        merged.update(cfg[section])
    return TrainConfig(seed=cfg["seed"] + seed_offset, **merged)


def _hparams(cfg):
    return ModelHParams(**cfg["model"])


# ---------------------------------------------------------------- steps

def step_synth(cfg):
    d = out_dir(cfg)
    echo = {"seed": cfg["seed"], "corpus": cfg["corpus"]}
    paths = {name: d / f"{name}.jsonl" for name in
             ("asr_train", "st_train", "dev", "test_parallel")}
    lex_path = d / "lexicon.json"
    if all(_step_fresh(p, echo) for p in paths.values()) and _step_fresh(lex_path, echo):
        log.info("synth: up to date")
        return
    c = cfg["corpus"]
    lexicon = build_lexicon(c["lexicon_size"], cfg["seed"])
    asr, st, dev, test_parallel = generate_corpus(
        lexicon, c["n_asr"], c["n_st"],
        sentence_len_range=tuple(c["sentence_len_range"]), seed=cfg["seed"],
        n_dev=c["n_dev"], n_test_parallel=c["n_test_parallel"],
        dwell_max=c["dwell_max"], noise_prob=c["noise_prob"])
    lexicon.save(lex_path)
    asr.save(paths["asr_train"])
    st.save(paths["st_train"])
    dev.save(paths["dev"])
    test_parallel.save(paths["test_parallel"])
    for p in list(paths.values()) + [lex_path]:
        _write_echo(p, echo)
    log.info("synth: wrote %d asr / %d st / %d dev utterances",
             len(asr), len(st), len(dev))


def step_testset(cfg):
    d = out_dir(cfg)
    echo = {"seed": cfg["seed"], "corpus": cfg["corpus"],
            "testset": cfg["testset"]}
    cs_path = d / "cs_test.jsonl"
    mono_paths = {"test_asr": d / "test_asr.jsonl", "test_st": d / "test_st.jsonl"}
    if _step_fresh(cs_path, echo) and all(_step_fresh(p, echo)
                                          for p in mono_paths.values()):
        log.info("testset: up to date")
        return
    lexicon = Lexicon.load(_require(d / "lexicon.json", "lexicon"))
    parallel = ParallelCorpus.load(_require(d / "test_parallel.jsonl",
                                            "parallel test pool"))
    t = cfg["testset"]
    c = cfg["corpus"]
    cs = build_cs_testset(parallel, lexicon, t["n_utterances"],
                          sentences_per_utterance=tuple(t["sentences_per_utterance"]),
                          seed=cfg["seed"], dwell_max=c["dwell_max"],
                          noise_prob=c["noise_prob"])
    cs.save(cs_path)
    _write_echo(cs_path, echo)

    # mono test sets rendered from the same parallel pool
    from .corpus import Utterance
    n_mono = min(t["n_mono_test"], len(parallel.sentences))
    for name, lang in (("test_asr", TGT), ("test_st", SRC)):
        utts = []
        for i, sent in enumerate(parallel.sentences[:n_mono]):
            words = sent.tgt_bare if lang == TGT else sent.src_bare
            frames = synthesize_audio(words, lang, c["dwell_max"],
                                      c["noise_prob"],
                                      cfg["seed"] ^ (0x5eed + i))
            utts.append(Utterance(
                id=f"{name}-{i:05d}", frames=frames,
                lid_spans=[(0, len(frames), lang)],
                transcript=words, target=sent.tgt_reference,
                kind="asr" if lang == TGT else "st"))
        manifest = Manifest(utterances=utts,
                            meta={"seed": cfg["seed"], "section": name})
        manifest.save(mono_paths[name])
        _write_echo(mono_paths[name], echo)
    log.info("testset: %d cs / %d mono utterances", len(cs), n_mono)


def step_augment(cfg, p_multi):
    d = out_dir(cfg)
    echo = {"seed": cfg["seed"], "corpus": cfg["corpus"], "p_multi": p_multi,
            "max_frames": cfg["augment"]["max_frames"]}
    path = d / f"da_{int(round(p_multi * 100)):02d}.jsonl"
    if _step_fresh(path, echo):
        log.info("augment %s: up to date", path.name)
        return path
    asr = Manifest.load(_require(d / "asr_train.jsonl", "ASR manifest"))
    st = Manifest.load(_require(d / "st_train.jsonl", "ST manifest"))
    da_cfg = DAConfig(p_multi=p_multi, max_frames=cfg["augment"]["max_frames"],
                      seed=cfg["seed"])
    manifest = apply_da(asr, st, da_cfg)
    manifest.save(path)
    _write_echo(path, echo)
    log.info("augment: wrote %s (%d utterances, multi fraction %.3f)",
             path.name, len(manifest), manifest.meta["p_multi_achieved"])
    return path


def _load_training_data(cfg, system):
    d = out_dir(cfg)
    asr = Manifest.load(_require(d / "asr_train.jsonl", "ASR manifest"))
    st = Manifest.load(_require(d / "st_train.jsonl", "ST manifest"))
    if system == "ASR":
        return asr
    if system == "ST":
        return st
    merged = Manifest(utterances=list(asr) + list(st),
                      meta={"section": "last_train"})
    if system == "LAST":
        return merged
    if system == "LAST_half":
        # deterministic every-second-utterance split
        half = Manifest(utterances=merged.utterances[::2],
                        meta={"section": "last_half_train"})
        return half
    raise ConfigurationError(f"unknown system {system!r}")


def step_train(cfg, system):
    d = out_dir(cfg)
    echo = {"seed": cfg["seed"], "corpus": cfg["corpus"],
            "model": cfg["model"], "train": cfg["train"], "system": system}
    path = d / f"model_{system}.pt"
    if _step_fresh(path, echo):
        log.info("train %s: up to date", system)
        return path
    lexicon = Lexicon.load(_require(d / "lexicon.json", "lexicon"))
    dev = Manifest.load(_require(d / "dev.jsonl", "dev manifest"))
    manifest = _load_training_data(cfg, system)
    # score checkpoints only on dev items of kinds the system is trained on
    kinds = {u.kind for u in manifest}
    dev = Manifest(utterances=[u for u in dev if u.kind in kinds],
                   meta=dev.meta)
    vocab = TargetVocab.from_lexicon(lexicon)
    model = init_model(_hparams(cfg), vocab, seed=cfg["seed"])
    tcfg = _train_config(cfg)
    checkpoints = train(model, manifest, dev, tcfg)
    averaged = average_checkpoints(checkpoints, tcfg.epochs_to_average)
    best = min(c.perplexity for c in checkpoints)
    save_checkpoint(averaged, path, epoch=len(checkpoints), dev_perplexity=best)
    _write_echo(path, echo)
    log.info("train %s: %d epochs, best dev ppl %.3f", system,
             len(checkpoints), best)
    return path


def step_finetune_da(cfg, p_multi):
    d = out_dir(cfg)
    echo = {"seed": cfg["seed"], "corpus": cfg["corpus"], "model": cfg["model"],
            "train": cfg["train"], "finetune": cfg["finetune"],
            "p_multi": p_multi}
    name = f"LAST+DA{int(round(p_multi * 100)):02d}"
    path = d / f"model_{name}.pt"
    if _step_fresh(path, echo):
        log.info("finetune %s: up to date", name)
        return path
    da_path = step_augment(cfg, p_multi)
    base = load_checkpoint(_require(d / "model_LAST.pt", "LAST checkpoint"))
    da_manifest = Manifest.load(da_path)
    dev = Manifest.load(_require(d / "dev.jsonl", "dev manifest"))
    tuned = finetune_da(base, da_manifest, dev,
                        _train_config(cfg, "finetune", seed_offset=1))
    save_checkpoint(tuned, path)
    _write_echo(path, echo)
    log.info("finetune %s done", name)
    return path


def _decode_system(system, testset_name, manifest, models):
    pairs = []
    for utt in manifest:
        if system == "pipeline":
            hyp = pipeline_decode(utt, models["ASR"], models["ST"])
        elif system == "given_lid_LAST":
            hyp = given_lid_decode(utt, models["LAST"])
        elif system in models:
            hyp = last_decode(utt, models[system])
        else:
            raise MissingArtifactError(f"no model for system {system}")
        pairs.append((utt.id, hyp))
    return pairs


def _da_system_names(cfg):
    return [f"LAST+DA{int(round(p * 100)):02d}" for p in cfg["augment"]["sweep"]]


def _systems_for(cfg, testset_name):
    base = list(cfg["systems"])
    da = _da_system_names(cfg)
    if testset_name == "cs":
        systems = ["pipeline", "given_lid_LAST"] + [s for s in base
                                                    if s not in ("ASR", "ST")]
        return systems + da
    if testset_name == "test_asr":
        return [s for s in base if s != "ST"] + da
    if testset_name == "test_st":
        return [s for s in base if s != "ASR"] + da
    raise ConfigurationError(f"unknown testset {testset_name}")


def _model_names_needed(cfg):
    names = set(s for s in cfg["systems"])
    names.update(("ASR", "ST", "LAST"))
    return sorted(names)


def step_decode(cfg):
    d = out_dir(cfg)
    testsets = {"test_asr": d / "test_asr.jsonl",
                "test_st": d / "test_st.jsonl",
                "cs": d / "cs_test.jsonl"}
    models = {}
    for name in _model_names_needed(cfg) + _da_system_names(cfg):
        path = d / f"model_{name}.pt"
        if path.exists():
            models[name] = load_checkpoint(path)
    produced = []
    for ts_name, ts_path in testsets.items():
        manifest = Manifest.load(_require(ts_path, f"testset {ts_name}"))
        for system in _systems_for(cfg, ts_name):
            echo = {"seed": cfg["seed"], "system": system, "testset": ts_name,
                    "model": cfg["model"], "train": cfg["train"],
                    "corpus": cfg["corpus"], "testset_cfg": cfg["testset"]}
            path = d / f"decode_{system}_{ts_name}.jsonl"
            if _step_fresh(path, echo):
                produced.append(path)
                continue
            needed = (["ASR", "ST"] if system == "pipeline"
                      else ["LAST"] if system == "given_lid_LAST" else [system])
            if any(n not in models for n in needed):
                raise MissingArtifactError(
                    f"system {system} needs models {needed}; missing "
                    f"{[n for n in needed if n not in models]}")
            pairs = _decode_system(system, ts_name, manifest, models)
            write_decodes(path, system, pairs)
            _write_echo(path, echo)
            log.info("decoded %s on %s", system, ts_name)
            produced.append(path)
    return produced


def step_evaluate(cfg):
    from .pipeline import read_decodes
    d = out_dir(cfg)
    testset_files = {"test_asr": ("asr", d / "test_asr.jsonl"),
                     "test_st": ("st", d / "test_st.jsonl"),
                     "cs": ("cs", d / "cs_test.jsonl")}
    testsets = {}
    for name, (kind, path) in testset_files.items():
        manifest = Manifest.load(_require(path, f"testset {name}"))
        testsets[name] = {"kind": kind,
                          "references": [u.target for u in manifest],
                          "ids": [u.id for u in manifest]}
    systems = {}
    for name, spec in testsets.items():
        for system in _systems_for(cfg, name):
            path = d / f"decode_{system}_{name}.jsonl"
            if not path.exists():
                continue
            pairs = dict(read_decodes(path))
            systems.setdefault(system, {})[name] = [
                pairs.get(utt_id, "") for utt_id in spec["ids"]]
    report = evaluate_suite(systems, testsets, flags=cfg["eval"])
    report.config["experiment"] = {k: v for k, v in cfg.items()
                                   if not k.startswith("_")}
    report_path = d / "report.json"
    report.save(report_path)
    _write_echo(report_path, {"seed": cfg["seed"]})
    print(report.format_table())
    return report


def step_reproduce(cfg):
    step_synth(cfg)
    step_testset(cfg)
    for system in _model_names_needed(cfg):
        step_train(cfg, system)
    for p in cfg["augment"]["sweep"]:
        step_finetune_da(cfg, p)
    step_decode(cfg)
    return step_evaluate(cfg)


def step_gradcheck(cfg):
    lexicon = build_lexicon(20, cfg["seed"])
    vocab = TargetVocab.from_lexicon(lexicon)
    # no subsampling: the ReLU convs are piecewise linear and would make
    # finite differences disagree with the analytic gradient at the kinks
    hp = ModelHParams(emb_dim=8, hidden_dim=8, enc_layers=1, dec_layers=1,
                      attn_dim=8, subsample_layers=0, dropout=0.0)
    model = init_model(hp, vocab, seed=cfg["seed"]).double()
    words = lexicon.tgt_words[:5]
    frames = synthesize_audio(words, TGT, 2, 0.0, cfg["seed"])
    target = " ".join(words).capitalize() + "."
    err = grad_check(model, (frames, target), epsilon=1e-5)
    print(f"gradcheck max relative error: {err:.3e}")
    if err >= 1e-4:
        raise NumericError(f"gradient check failed: {err:.3e} >= 1e-4")


def step_punct_train(cfg, out_path):
    d = out_dir(cfg)
    manifest = Manifest.load(_require(d / "asr_train.jsonl", "ASR manifest"))
    restorer = punct_mod.train_restorer([u.target for u in manifest])
    restorer.save(out_path)
    log.info("wrote restorer to %s", out_path)


def step_punct_apply(restorer_path, in_path, out_path):
    restorer = punct_mod.Restorer.load(_require(restorer_path, "restorer"))
    with open(_require(in_path, "input text"), encoding="utf-8") as f_in, \
            open(out_path, "w", encoding="utf-8") as f_out:
        for line in f_in:
            f_out.write(punct_mod.restore(restorer, line.strip()) + "\n")


def step_compare(cfg):
    d = out_dir(cfg)
    report = EvalReport.load(_require(d / "report.json", "evaluation report"))
    print(report.format_table())


# ---------------------------------------------------------------- CLI

def build_parser():
    parser = argparse.ArgumentParser(
        prog="cs-forge",
        description="synthetic code-switching speech translation testbed")
    parser.add_argument("command", choices=[
        "synth", "augment", "testset", "train", "finetune-da", "decode",
        "evaluate", "compare", "gradcheck", "punct-train", "punct-apply",
        "reproduce"])
    parser.add_argument("--config", required=True, help="experiment JSON config")
    parser.add_argument("--out", help="override output directory")
    parser.add_argument("--seed", type=int, help="override seed")
    parser.add_argument("--system", help="system name for `train`")
    parser.add_argument("--p-multi", type=float,
                        help="multi-language fraction for augment/finetune-da")
    parser.add_argument("--restorer", help="restorer path for punct commands")
    parser.add_argument("--input", help="input text file for punct-apply")
    parser.add_argument("--output", help="output path for punct commands")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(args):
    cfg = load_config(args.config,
                      overrides={"output_dir": args.out, "seed": args.seed})
    cmd = args.command
    if cmd == "synth":
        step_synth(cfg)
    elif cmd == "testset":
        step_synth(cfg)
        step_testset(cfg)
    elif cmd == "augment":
        step_synth(cfg)
        for p in ([args.p_multi] if args.p_multi is not None
                  else cfg["augment"]["sweep"]):
            step_augment(cfg, p)
    elif cmd == "train":
        systems = [args.system] if args.system else _model_names_needed(cfg)
        for system in systems:
            step_train(cfg, system)
    elif cmd == "finetune-da":
        for p in ([args.p_multi] if args.p_multi is not None
                  else cfg["augment"]["sweep"]):
            step_finetune_da(cfg, p)
    elif cmd == "decode":
        step_decode(cfg)
    elif cmd == "evaluate":
        step_evaluate(cfg)
    elif cmd == "compare":
        step_compare(cfg)
    elif cmd == "gradcheck":
        step_gradcheck(cfg)
    elif cmd == "punct-train":
        step_punct_train(cfg, args.output or str(out_dir(cfg) / "restorer.json"))
    elif cmd == "punct-apply":
        if not args.restorer or not args.input or not args.output:
            raise ConfigurationError(
                "punct-apply needs --restorer, --input and --output")
        step_punct_apply(args.restorer, args.input, args.output)
    elif cmd == "reproduce":
        step_reproduce(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args)
    except CsForgeError as e:
        print(f"cs-forge: error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
