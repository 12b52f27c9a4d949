"""Command-line entry point: ``csskit <command> [--config FILE] [--seed N] [--out DIR] [--dry-run]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from . import checkpoint as ckpt
from .bench import SweepEntry, cost_sweep, make_probe
from .config import ConfigError, RunConfig, load_config
from .css import css_run
from .dsp import InvalidAudioError, read_wav, write_wav
from .scoring import (ScoringError, best_permutation_wer, read_transcripts, segmented_speaker_agnostic_wer,
                      speaker_agnostic_wer)
from .separator import SeparationSystem, SeparatorConfig, TrainConfig, default_stages, prepare_example, train
from .separator.train import separate_utterance
from .simulate import (SimulationConfig, generate_sample, measure_sir, measure_snr, read_manifest,
                       write_manifest)
from .ssl_encoder import (EncoderConfig, KMeansTokenizer, LabelCache, PretrainConfig, base_features,
                          fit_kmeans, msp_pretrain)

log = logging.getLogger("csskit")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
COMMANDS = ("simulate", "tokenize", "pretrain", "train", "separate", "css", "score", "bench")


class UserError(Exception):
    pass


# ---------------------------------------------------------------- run directory

class RunDir:
    def __init__(self, root: Path):
        self.root = root
        for sub in ("checkpoints", "audio", "reports"):
            (root / sub).mkdir(parents=True, exist_ok=True)

    def __truediv__(self, other):
        return self.root / other

    def report(self, name: str, obj) -> Path:
        path = self.root / "reports" / name
        with open(path, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
        return path


def _need(path: str | None, what: str, flag: str) -> Path:
    if not path:
        raise UserError(f"{what} not given (set {flag})")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} {p} does not exist")
    return p


def _encoder_config(cfg: RunConfig) -> EncoderConfig:
    e = cfg.encoder
    if e.preset:
        return EncoderConfig.preset(e.preset, frame_shift_ms=e.frame_shift_ms, vocab_k=e.kmeans_k)
    return EncoderConfig(n_layers=e.n_layers, n_heads=e.n_heads, model_dim=e.model_dim, ff_dim=e.ff_dim,
                         frame_shift_ms=e.frame_shift_ms, vocab_k=e.kmeans_k)


def _separator_config(cfg: RunConfig) -> SeparatorConfig:
    s = cfg.separator
    if s.preset:
        return SeparatorConfig.preset(s.preset, n_outputs=s.n_outputs)
    return SeparatorConfig(n_layers=s.n_layers, n_heads=s.n_heads, model_dim=s.model_dim, ff_dim=s.ff_dim,
                           n_outputs=s.n_outputs)


def _load_corpus(cfg: RunConfig):
    manifest = _need(cfg.paths.corpus_manifest, "corpus manifest", "paths.corpus_manifest")
    records = read_manifest(manifest)
    utts, skipped = [], []
    for rec in records:
        try:
            utts.append((rec, read_wav(rec["wav_path"], cfg.signal.sample_rate)))
        except (OSError, InvalidAudioError, ValueError) as exc:
            log.error("skipping %s: %s", rec["utterance_id"], exc)
            skipped.append(rec["utterance_id"])
    if records and len(skipped) / len(records) > cfg.simulate.max_skip_fraction:
        raise UserError(f"{len(skipped)}/{len(records)} corpus items unreadable "
                        f"(limit {cfg.simulate.max_skip_fraction:.0%}); aborting")
    if not utts:
        raise UserError(f"{manifest}: no usable utterances")
    return utts, skipped


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: RunConfig, run: RunDir, args) -> dict:
    utts, skipped = _load_corpus(cfg)
    noise_dir = _need(cfg.paths.noise_dir, "noise directory", "paths.noise_dir")
    noises = [read_wav(p, cfg.signal.sample_rate) for p in sorted(noise_dir.glob("*.wav"))]
    if not noises:
        raise UserError(f"{noise_dir}: no .wav noise files")
    s = cfg.simulate
    sim = SimulationConfig(sample_rate=cfg.signal.sample_rate, patterns=s.patterns, sir_range=s.sir_range,
                           snr_range=s.snr_range, room_size_range=s.room_size_range,
                           room_height_range=s.room_height_range, absorption_range=s.absorption_range,
                           max_reflection_order=s.max_reflection_order, max_gap=s.max_gap,
                           overlap_target=s.overlap_target)
    pool = [(a, rec["speaker_id"]) for rec, a in utts]
    data_dir = run / "audio" / "mixtures"
    data_dir.mkdir(parents=True, exist_ok=True)
    records, counts, sirs, snrs = [], {}, [], []
    for i in range(s.n_samples):
        sample = generate_sample(pool, noises, sim, cfg.seed * 1_000_003 + i)
        mid = f"mix_{i:06d}"
        write_wav(data_dir / f"{mid}.wav", sample.mixture)
        refs = []
        for k, r in enumerate(sample.references):
            write_wav(data_dir / f"{mid}_s{k}.wav", r)
            refs.append(f"{mid}_s{k}.wav")
        side = sample.sidecar()
        side["measured_snr_db"] = measure_snr(sample)
        if len(sample.references) > 1:
            side["measured_sir_db"] = measure_sir(sample)
            sirs.append(side["measured_sir_db"])
        snrs.append(side["measured_snr_db"])
        with open(data_dir / f"{mid}.json", "w") as f:
            json.dump(side, f, indent=2)
        counts[sample.spec.pattern] = counts.get(sample.spec.pattern, 0) + 1
        records.append({"mixture_id": mid, "mixture": f"{mid}.wav", "references": refs,
                        "sidecar": f"{mid}.json", "pattern": sample.spec.pattern})
    write_manifest(data_dir / "mixtures.jsonl", records)

    def hist(xs, lo, hi):
        if not xs:
            return {"edges": [], "counts": []}
        c, e = np.histogram(xs, bins=10, range=(lo, hi))
        return {"edges": e.round(3).tolist(), "counts": c.tolist()}

    summary = {"n_samples": s.n_samples, "pattern_counts": counts, "skipped_sources": skipped,
               "sir_histogram": hist(sirs, *s.sir_range), "snr_histogram": hist(snrs, *s.snr_range),
               "manifest": str(data_dir / "mixtures.jsonl")}
    run.report("simulate_summary.json", summary)
    return summary


def _features_for(cfg: RunConfig, utts):
    return [base_features(a, cfg.encoder.frame_shift_ms) for _, a in utts]


def cmd_tokenize(cfg: RunConfig, run: RunDir, args) -> dict:
    utts, skipped = _load_corpus(cfg)
    feats = _features_for(cfg, utts)
    tok = fit_kmeans(np.concatenate(feats), cfg.encoder.kmeans_k, cfg.encoder.kmeans_iters, cfg.seed)
    path = run / "checkpoints" / "tokenizer.npy"
    tok.save(path)
    cache = LabelCache(run / "labels", tok.hash())
    for (rec, _), f in zip(utts, feats):
        cache.put(rec["utterance_id"], tok.predict(f))
    out = {"tokenizer": str(path), "hash": tok.hash(), "k": tok.k, "distortion": tok.distortion,
           "utterances": len(utts), "skipped": skipped}
    run.report("tokenize.json", out)
    return out


def cmd_pretrain(cfg: RunConfig, run: RunDir, args) -> dict:
    utts, _ = _load_corpus(cfg)
    tok_path = Path(cfg.paths.tokenizer) if cfg.paths.tokenizer else run / "checkpoints" / "tokenizer.npy"
    if not tok_path.exists():
        raise UserError(f"tokenizer {tok_path} does not exist (run `tokenize` first or set paths.tokenizer)")
    tok = KMeansTokenizer.load(tok_path)
    cache = LabelCache(run / "labels", tok.hash())
    corpus = []
    for (rec, a), f in zip(utts, _features_for(cfg, utts)):
        uid = rec["utterance_id"]
        corpus.append((a, cache.get(uid) if uid in cache else tok.predict(f)))
    e = cfg.encoder
    enc_cfg = replace(_encoder_config(cfg), vocab_k=tok.k)
    hyper = PretrainConfig(steps=e.pretrain_steps, batch_size=e.batch_size, crop_frames=e.crop_frames,
                           learning_rate=e.learning_rate, weight_decay=e.weight_decay, mix_prob=e.mix_prob,
                           seed=cfg.seed, log_every=0)
    res = msp_pretrain(enc_cfg, corpus, hyper)
    path = ckpt.save_encoder(run / "checkpoints" / "encoder.ckpt", res.encoder, res.step,
                             {"tokenizer_hash": tok.hash()})
    with open(run / "reports" / "pretrain_metrics.jsonl", "w") as f:
        for i, (loss, acc) in enumerate(zip(res.losses, res.accuracies)):
            f.write(json.dumps({"step": i, "loss": loss, "masked_accuracy": acc}) + "\n")
    return {"checkpoint": str(path), "steps": res.step, "final_loss": res.losses[-1] if res.losses else None}


def _load_mixtures(manifest: Path, sr: int):
    base = manifest.parent
    samples = []
    with open(manifest) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(SimpleNamespace(
                mixture=read_wav(base / rec["mixture"], sr),
                references=[read_wav(base / r, sr) for r in rec["references"]]))
    if not samples:
        raise UserError(f"{manifest}: no mixtures")
    return samples


def cmd_train(cfg: RunConfig, run: RunDir, args) -> dict:
    manifest = Path(cfg.paths.data_manifest) if cfg.paths.data_manifest else run / "audio/mixtures/mixtures.jsonl"
    if not manifest.exists():
        raise UserError(f"data manifest {manifest} does not exist (run `simulate` or set paths.data_manifest)")
    s = cfg.separator
    encoder = None
    if s.use_ssl:
        enc_path = (Path(cfg.paths.encoder_checkpoint) if cfg.paths.encoder_checkpoint
                    else run / "checkpoints" / "encoder.ckpt")
        if not enc_path.exists():
            raise UserError(f"encoder checkpoint {enc_path} does not exist (run `pretrain`, "
                            "set paths.encoder_checkpoint, or separator.use_ssl=false)")
        encoder, _ = ckpt.load_encoder(enc_path)
    samples = _load_mixtures(manifest, cfg.signal.sample_rate)
    shift = encoder.cfg.frame_shift_ms if encoder is not None else None
    examples = [prepare_example(x, s.n_outputs, shift) for x in samples]
    n_dev = max(1, int(round(s.dev_fraction * len(examples)))) if len(examples) > 1 else 0
    data, dev = examples[:len(examples) - n_dev], examples[len(examples) - n_dev:]
    torch.manual_seed(cfg.seed)
    model = SeparationSystem(_separator_config(cfg), encoder, s.use_layers)
    stages = default_stages(s.learning_rate, s.warmup_steps, s.frozen_steps,
                            s.unfrozen_steps if encoder is not None else 0)
    tcfg = TrainConfig(batch_size=s.batch_size, crop_seconds=s.crop_seconds, eval_every=s.eval_every,
                       grad_clip=s.grad_clip, weight_decay=s.weight_decay, seed=cfg.seed)
    res = train(model, stages, data, dev, tcfg)
    path = ckpt.save_system(run / "checkpoints" / "system.ckpt", model, res.best_step)
    res.write_metrics(run / "reports" / "train_metrics.jsonl")
    out = {"checkpoint": str(path), "best_step": res.best_step, "best_dev_loss": res.best_dev_loss,
           "dev_scores": res.dev_scores, "train_examples": len(data), "dev_examples": len(dev)}
    run.report("train.json", out)
    return out


def _system(cfg: RunConfig, run: RunDir):
    path = Path(cfg.paths.system_checkpoint) if cfg.paths.system_checkpoint else run / "checkpoints" / "system.ckpt"
    if not path.exists():
        raise UserError(f"system checkpoint {path} does not exist (run `train` or set paths.system_checkpoint)")
    return ckpt.load_system(path)[0]


def _inputs(args) -> list[Path]:
    if not args.inputs:
        raise UserError(f"`{args.command}` needs at least one input WAV")
    paths = [Path(p) for p in args.inputs]
    for p in paths:
        if not p.exists():
            raise UserError(f"input {p} does not exist")
    return paths


def cmd_separate(cfg: RunConfig, run: RunDir, args) -> dict:
    model = _system(cfg, run)
    written = []
    for p in _inputs(args):
        outs = separate_utterance(model, read_wav(p, cfg.signal.sample_rate))
        for k, o in enumerate(outs):
            dst = run / "audio" / f"{p.stem}_s{k}.wav"
            write_wav(dst, o)
            written.append(str(dst))
    return {"outputs": written}


def cmd_css(cfg: RunConfig, run: RunDir, args) -> dict:
    model = _system(cfg, run)
    c = cfg.css
    reports = {}
    for p in _inputs(args):
        res = css_run(model, read_wav(p, cfg.signal.sample_rate), c.t_h, c.t_c, c.t_f, use_agc=c.agc,
                      merge=c.merge, merge_kwargs={"window": c.merge_window, "hop": c.merge_hop,
                                                   "ratio_db": c.merge_ratio_db, "crossfade": c.crossfade})
        files = []
        for k, s in enumerate(res.streams):
            dst = run / "audio" / f"{p.stem}_stream{k}.wav"
            write_wav(dst, s)
            files.append(str(dst))
        reports[p.name] = {**res.report, "outputs": files}
    run.report("css_report.json", reports)
    return reports


def cmd_score(cfg: RunConfig, run: RunDir, args) -> dict:
    if not args.hyp or not args.ref:
        raise UserError("`score` needs --hyp and --ref transcript files")
    hyp_path, ref_path = _need(args.hyp, "hypothesis file", "--hyp"), _need(args.ref, "reference file", "--ref")
    hyps = read_transcripts(hyp_path)
    if args.mode == "segmented":
        rep = segmented_speaker_agnostic_wer(hyps, read_transcripts(ref_path, by="utterance_id"),
                                             args.max_silence)
    elif args.mode == "permutation":
        rep = best_permutation_wer(hyps, read_transcripts(ref_path))
    else:
        rep = speaker_agnostic_wer(hyps, read_transcripts(ref_path))
    out = {"mode": args.mode, **rep.as_dict()}
    run.report("score.json", out)
    (run / "reports" / "score.txt").write_text(rep.to_text() + "\n")
    print(rep.to_text())
    return out


def cmd_bench(cfg: RunConfig, run: RunDir, args) -> dict:
    b = cfg.bench
    sep = SeparatorConfig(n_layers=2, n_heads=2, model_dim=b.sweep_separator_dim, ff_dim=2 * b.sweep_separator_dim)
    enc = EncoderConfig(n_layers=max(b.layer_sweep), n_heads=4, model_dim=b.sweep_encoder_dim,
                        ff_dim=4 * b.sweep_encoder_dim)
    entries = [SweepEntry("baseline", sep)]
    entries += [SweepEntry(f"ssl-L{k}", sep, enc, k) for k in b.layer_sweep]
    entries += [SweepEntry(f"enc-{f}ms", None, replace(enc, frame_shift_ms=f)) for f in b.frame_shifts]
    probe = make_probe(b.probe_seconds, cfg.signal.sample_rate, cfg.seed)
    records, table = cost_sweep(entries, probe, b.runs, cfg.seed, b.rounds, b.warmup)
    run.report("bench.json", {"records": records})
    (run / "reports" / "bench.txt").write_text(table + "\n")
    print(table)
    return {"records": records}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csskit", description="Continuous speech separation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="run directory (overrides paths.run_dir)")
        p.add_argument("--dry-run", action="store_true", help="validate the config and inputs, then exit")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("separate", "css"):
            p.add_argument("inputs", nargs="*", help="input WAV files")
        if name == "score":
            p.add_argument("--hyp", help="hypothesis transcript JSONL")
            p.add_argument("--ref", help="reference transcript JSONL")
            p.add_argument("--mode", choices=("agnostic", "permutation", "segmented"), default="agnostic")
            p.add_argument("--max-silence", type=float, default=0.5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"paths.run_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        if args.dry_run:
            print(json.dumps({"command": args.command, "config": "ok", "run_dir": cfg.paths.run_dir}))
            return EXIT_OK
        torch.manual_seed(cfg.seed)
        run = RunDir(Path(cfg.paths.run_dir))
        cfg.dump(run / "config.yaml")
        t0 = time.perf_counter()
        HANDLERS[args.command](cfg, run, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return EXIT_OK
    except (UserError, ConfigError, ScoringError, InvalidAudioError, ckpt.CheckpointError,
            FileNotFoundError) as exc:
        print(f"csskit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - reported as an internal failure
        log.exception("internal error")
        print(f"csskit {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
