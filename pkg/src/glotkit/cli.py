"""Command-line interface.

Subcommands: synth-data, pretrain, train, analyze, evaluate, report.
Exit codes: 0 success, 1 usage error, 2 data error, 3 training abort
(including the collapse guard).  A JSON run-config file can provide
defaults for the common flags (--data, --out, --seed, --toy); its path
comes from --config or the GLOTKIT_CONFIG environment variable, and
explicit flags win over config values.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import corpus, gci_eval
from .autodiff import load_checkpoint
from .corpus import Dataset, DatasetError, perturb_utterance, \
    random_utterance_spec, read_dataset, split_dataset, synth_utterance, \
    write_dataset
from .dsp import AudioBuffer
from .models import Analyzer, AnalyzerConfig, Synthesizer, SynthesizerConfig, \
    analyzer_forward, toy_configs
from .trainer import CollapseError, TrainConfig, joint_train, \
    pretrain_analyzer, pretrain_synthesizer

CONFIG_ENV = "GLOTKIT_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_run_config(path):
    if not path:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read run config {path}: {exc}") from exc


def _cfg(args, name, default=None):
    v = getattr(args, name.replace("-", "_"), None)
    if v is not None:
        return v
    return args._run_config.get(name, default)


def _parse_kv(text):
    out = {}
    for part in text.split(","):
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = float(v)
    return out


# ---------------------------------------------------------------------------
# dataset helpers

def _split_records(dataset, split, kind):
    return list(dataset.records(split=split, kind=kind))


def _train_config(args):
    cfg = TrainConfig()
    if _cfg(args, "toy", False):
        for ph, batch, upd, epochs in (
                (cfg.step1_analyzer, 16, 50, 12),
                (cfg.step1_synth, 8, 30, 8),
                (cfg.step2, 8, 40, 8)):
            ph.batch = batch
            ph.updates_per_epoch = upd
            ph.epochs = epochs
    if getattr(args, "epochs", None):
        cfg.step1_analyzer.epochs = args.epochs
        cfg.step1_synth.epochs = args.epochs
        cfg.step2.epochs = args.epochs
    if getattr(args, "updates", None):
        cfg.step1_analyzer.updates_per_epoch = args.updates
        cfg.step1_synth.updates_per_epoch = args.updates
        cfg.step2.updates_per_epoch = args.updates
    if getattr(args, "batch", None):
        cfg.step1_analyzer.batch = args.batch
        cfg.step1_synth.batch = args.batch
        cfg.step2.batch = args.batch
    if getattr(args, "ablate_a_spectral", False):
        cfg.ablate_a_spectral = True
    return cfg


def _models_for(args, seed):
    if _cfg(args, "toy", False):
        ac, sc = toy_configs()
    else:
        ac, sc = AnalyzerConfig(), SynthesizerConfig()
    return Analyzer(ac, seed=seed), Synthesizer(sc, seed=seed + 1)


def _load_analyzer(path):
    """Rebuild an analyzer from a checkpoint, inferring its width."""
    tensors = load_checkpoint(path)
    key = "analyzer.conv0.w"
    if key not in tensors:
        raise DatasetError(f"{path} holds no analyzer parameters")
    width = tensors[key].data.shape[0]
    analyzer = Analyzer(AnalyzerConfig(channels=width))
    analyzer.load_state({k[len("analyzer."):]: t for k, t in tensors.items()
                         if k.startswith("analyzer.")
                         and not k.startswith("analyzer.adam.")})
    analyzer.freeze_batchnorm()
    return analyzer


def _load_synthesizer(path):
    tensors = load_checkpoint(path)
    key = "synth.in.w"
    if key not in tensors:
        raise DatasetError(f"{path} holds no synthesizer parameters")
    width = tensors[key].data.shape[0]
    skip = tensors["synth.out1.w"].data.shape[0]
    synth = Synthesizer(SynthesizerConfig(residual_channels=width,
                                          skip_channels=skip))
    synth.load_state({k[len("synth."):]: t for k, t in tensors.items()
                      if k.startswith("synth.")
                      and not k.startswith("synth.adam.")})
    return synth


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args):
    n = args.n
    seed = int(_cfg(args, "seed", 0))
    out = _cfg(args, "out") or _cfg(args, "dataset-dir")
    if out is None:
        raise UsageError("synth-data requires --out")
    records = []
    for i in range(n):
        spec = random_utterance_spec(seed * 100003 + i, args.duration)
        records.append(synth_utterance(spec))
    splits = _parse_kv(args.splits)
    manifest = corpus.DatasetManifest(
        entries=[{"id": r.utterance_id, "wav": "", "sidecar": "",
                  "split": "train", "kind": r.kind, "speaker": r.speaker_id}
                 for r in records], seed=seed)
    manifest = split_dataset(manifest, splits, seed)
    tags = {e["id"]: e["split"] for e in manifest.entries}
    for r in records:
        r.split_tag = tags[r.utterance_id]
    if args.perturb:
        kv = _parse_kv(args.perturb)
        extra = []
        for i, r in enumerate(records):
            p = perturb_utterance(r, kv.get("jitter", 0.0),
                                  kv.get("shimmer", 0.0),
                                  kv.get("morph", 0.0), seed=seed + 7919 + i)
            p.utterance_id = r.utterance_id + "-pr"
            extra.append(p)
        records.extend(extra)
    write_dataset(records, out, seed=seed)
    print(f"wrote {len(records)} utterances to {out}")
    return 0


def cmd_pretrain(args):
    data = _cfg(args, "data") or _cfg(args, "dataset-dir")
    out = _cfg(args, "out") or _cfg(args, "checkpoint-dir")
    if data is None or out is None:
        raise UsageError("pretrain requires --data and --out")
    seed = int(_cfg(args, "seed", 0))
    dataset = read_dataset(data)
    train = _split_records(dataset, "train", "synthetic")
    val = _split_records(dataset, "valid", "synthetic")
    cfg = _train_config(args)
    analyzer, synth = _models_for(args, seed)
    if args.target in ("analyzer", "both"):
        hist = pretrain_analyzer(train, val, analyzer, cfg, seed=seed,
                                 out_dir=out, resume=args.resume)
        print(f"analyzer pretraining: {len(hist)} epochs, "
              f"final val {hist[-1]['val']:.6g}")
    if args.target in ("synth", "synthesizer", "both"):
        hist = pretrain_synthesizer(train, val, synth, cfg, seed=seed,
                                    out_dir=out, resume=args.resume)
        print(f"synthesizer pretraining: {len(hist)} epochs, "
              f"final val {hist[-1]['val']:.6g}")
    return 0


def cmd_train(args):
    data = _cfg(args, "data") or _cfg(args, "dataset-dir")
    out = _cfg(args, "out") or _cfg(args, "checkpoint-dir")
    if data is None or out is None:
        raise UsageError("train requires --data and --out")
    seed = int(_cfg(args, "seed", 0))
    dataset = read_dataset(data)
    synthetic = _split_records(dataset, "train", "synthetic")
    pseudo = _split_records(dataset, "train", "pseudo-real")
    pseudo_val = _split_records(dataset, "valid", "pseudo-real")
    cfg = _train_config(args)
    a_ckpt = args.analyzer_ckpt or os.path.join(out, "analyzer_step1.ckpt")
    s_ckpt = args.synth_ckpt or os.path.join(out, "synth_step1.ckpt")
    for p in (a_ckpt, s_ckpt):
        if not os.path.exists(p):
            raise DatasetError(f"missing pretrained checkpoint {p}")
    analyzer = _load_analyzer(a_ckpt)
    synth = _load_synthesizer(s_ckpt)
    hist = joint_train(synthetic, pseudo, analyzer, synth, cfg, seed=seed,
                       out_dir=out, resume=args.resume,
                       pseudo_val_records=pseudo_val)
    print(f"joint training: {len(hist)} epochs, final val {hist[-1]['val']:.6g}")
    return 0


def _analyze_one(analyzer, audio, out_base):
    pulses = analyzer_forward(analyzer, audio)
    gci = gci_eval.flow_to_gci(pulses)
    np.save(out_base + ".pulses.npy", pulses.samples)
    with open(out_base + ".gci", "w") as f:
        for t in gci.times:
            f.write(f"{t:.9f}\n")
    return len(gci)


def cmd_analyze(args):
    out = _cfg(args, "out") or _cfg(args, "report-dir") or "."
    os.makedirs(out, exist_ok=True)
    if not args.ckpt:
        raise UsageError("analyze requires --ckpt")
    analyzer = _load_analyzer(args.ckpt)
    if args.audio:
        audio = corpus._read_wav(args.audio)
        if audio.sample_rate != 16000:
            raise DatasetError(
                f"{args.audio}: sample rate {audio.sample_rate}, need 16000")
        base = os.path.join(out, os.path.splitext(os.path.basename(args.audio))[0])
        n = _analyze_one(analyzer, audio, base)
        print(f"{args.audio}: {n} GCIs -> {base}.gci")
        return 0
    data = _cfg(args, "data") or _cfg(args, "dataset-dir")
    if data is None:
        raise UsageError("analyze requires --audio or --data")
    dataset = read_dataset(data)
    for rec in dataset.records(split=args.split or None):
        base = os.path.join(out, rec.utterance_id)
        n = _analyze_one(analyzer, rec.audio, base)
        print(f"{rec.utterance_id}: {n} GCIs")
    return 0


def _read_gci_file(path):
    times = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                times.append(float(line))
    return np.asarray(times)


def cmd_evaluate(args):
    out = _cfg(args, "out") or _cfg(args, "report-dir") or "."
    os.makedirs(out, exist_ok=True)
    data = _cfg(args, "data") or _cfg(args, "dataset-dir")
    if data is None:
        raise UsageError("evaluate requires --data")
    dataset = read_dataset(data)
    reports = []
    speaker_map = {}
    any_undefined = False
    for rec in dataset.records(split=args.split or None,
                               kind=args.kind or None):
        if args.det_dir:
            det_path = os.path.join(args.det_dir, rec.utterance_id + ".gci")
            if not os.path.exists(det_path):
                raise DatasetError(f"missing detection file {det_path}")
            det = gci_eval.GciList(_read_gci_file(det_path))
        elif args.ckpt:
            analyzer = getattr(cmd_evaluate, "_analyzer", None)
            if analyzer is None or cmd_evaluate._ckpt != args.ckpt:
                analyzer = _load_analyzer(args.ckpt)
                cmd_evaluate._analyzer = analyzer
                cmd_evaluate._ckpt = args.ckpt
            pulses = analyzer_forward(analyzer, rec.audio)
            det = gci_eval.flow_to_gci(pulses, voicing=rec.voicing,
                                       frame_hop=rec.frame_hop)
        else:
            if rec.pulse_target is None:
                raise UsageError(
                    "evaluate needs --ckpt or --det-dir for pseudo-real data")
            det = gci_eval.flow_to_gci(rec.pulse_target,
                                       voicing=rec.voicing,
                                       frame_hop=rec.frame_hop)
        match = gci_eval.associate(det, rec.gci)
        rep = gci_eval.compute_metrics(match, label=rec.utterance_id)
        any_undefined = any_undefined or rep.undefined
        reports.append(rep)
        speaker_map[rec.utterance_id] = rec.speaker_id
    speaker_reports, total = gci_eval.aggregate(reports, speaker_map)
    all_reports = reports + list(speaker_reports.values())
    if total is not None:
        all_reports.append(total)
    path = os.path.join(out, args.name or "report.txt")
    gci_eval.emit_report(all_reports, path)
    if total is not None:
        print(f"total: IDR {total.idr:.2f} MR {total.mr:.2f} "
              f"FAR {total.far:.2f} IDA {total.ida:.3f} ms -> {path}")
    else:
        print(f"no defined metrics -> {path}")
    return 2 if (any_undefined or total is None) else 0


def cmd_report(args):
    rows = []
    for path in args.inputs:
        base = path[:-5] if path.endswith(".json") else path
        if not os.path.exists(base + ".json"):
            raise DatasetError(f"missing report {base}.json")
        for rep in gci_eval.parse_report(base):
            if rep.scope == "total":
                rep.label = os.path.basename(base)
                rows.append(rep)
    lines = ["model\tIDR\tMR\tFAR\tIDA"]
    for r in rows:
        lines.append(f"{r.label}\t{r.idr:.2f}\t{r.mr:.2f}\t{r.far:.2f}\t{r.ida:.3f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="glotkit",
                description="Glottal closure instant analysis-synthesis toolkit")
    p.add_argument("--config", help="JSON run-config path "
                   f"(default: ${CONFIG_ENV})")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("synth-data", help="generate an annotated dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--duration", type=float, default=3.0)
    sp.add_argument("--splits", default="train=0.8,valid=0.1,test=0.1")
    sp.add_argument("--perturb",
                    help="e.g. jitter=5,shimmer=3,morph=0.5 (adds pseudo-real)")

    for name in ("pretrain", "train"):
        tp = sub.add_parser(name, help=f"{name} networks")
        tp.add_argument("--data")
        tp.add_argument("--out")
        tp.add_argument("--seed", type=int)
        tp.add_argument("--toy", action="store_true", default=None)
        tp.add_argument("--epochs", type=int)
        tp.add_argument("--updates", type=int)
        tp.add_argument("--batch", type=int)
        tp.add_argument("--resume", action="store_true")
        if name == "pretrain":
            tp.add_argument("--target",
                            choices=("analyzer", "synth", "synthesizer", "both"),
                            default="both")
        else:
            tp.add_argument("--ablate-a-spectral", action="store_true")
            tp.add_argument("--analyzer-ckpt")
            tp.add_argument("--synth-ckpt")

    ap = sub.add_parser("analyze", help="extract pulses and GCIs")
    ap.add_argument("--audio")
    ap.add_argument("--data")
    ap.add_argument("--ckpt", required=False)
    ap.add_argument("--out")
    ap.add_argument("--split")

    ep = sub.add_parser("evaluate", help="score detections against references")
    ep.add_argument("--data")
    ep.add_argument("--ckpt")
    ep.add_argument("--det-dir")
    ep.add_argument("--out")
    ep.add_argument("--split")
    ep.add_argument("--kind")
    ep.add_argument("--name")

    rp = sub.add_parser("report", help="combine evaluation reports")
    rp.add_argument("inputs", nargs="+")
    rp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        args._run_config = _load_run_config(
            args.config or os.environ.get(CONFIG_ENV))
        handler = {
            "synth-data": cmd_synth_data,
            "pretrain": cmd_pretrain,
            "train": cmd_train,
            "analyze": cmd_analyze,
            "evaluate": cmd_evaluate,
            "report": cmd_report,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except CollapseError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
