"""Command-line pipeline: synthetic corpus, preparation, augmentation, training,
editing and evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage / config / schema error.
``EMOEDIT_DATA_ROOT`` overrides the ``data_root`` used for default corpus paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import augment, corpus, editor, evalkit, signal, synth, training
from .fileio import write_csv_atomic, write_json_atomic, write_text_atomic
from .model import EmoCampNet, ModelConfig

logger = logging.getLogger("emoedit")

ENV_DATA_ROOT = "EMOEDIT_DATA_ROOT"
SPLIT_FILES = {s: f"{s}.jsonl" for s in corpus.SPLITS}


class UsageError(Exception):
    """Bad configuration or input format (exit code 2)."""


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    data_root: str = "."
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    frame: dict = field(default_factory=dict)
    ser: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.model_config()
            self.train_config()
            self.frame_config()
            evalkit.SerConfig.from_dict(self.ser)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None

    def model_config(self, toy: bool = False) -> ModelConfig:
        unknown = set(self.model) - {f.name for f in fields(ModelConfig)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig.toy(**self.model) if toy else ModelConfig(**self.model)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig.from_dict(self.train)

    def frame_config(self) -> signal.FrameConfig:
        unknown = set(self.frame) - {f.name for f in fields(signal.FrameConfig)}
        if unknown:
            raise ValueError(f"unknown frame config keys: {sorted(unknown)}")
        cfg = signal.FrameConfig(**self.frame)
        if cfg.n_cepstra != signal.N_CEPSTRA:
            raise ValueError(f"n_cepstra is fixed at {signal.N_CEPSTRA} by the feature layout")
        return cfg


def load_run_config(path: str | None) -> RunConfig:
    d = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
        if not isinstance(d, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    cfg = RunConfig.from_dict(d)
    if os.environ.get(ENV_DATA_ROOT):
        cfg.data_root = os.environ[ENV_DATA_ROOT]
    return cfg


def _kebab(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()):
    """One optional flag per dataclass field; unset flags stay None."""
    group = p.add_argument_group(f"{cls.__name__} overrides")
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = f.type if isinstance(f.type, type) else {"int": int, "float": float}.get(str(f.type), str)
        group.add_argument(_kebab(f.name), dest=f"{cls.__name__}.{f.name}", type=kind, default=None)


def _overrides(args, cls) -> dict:
    prefix = f"{cls.__name__}."
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- data directory helpers

def _feature_name(utt_id: str) -> str:
    return utt_id.replace("/", "__") + ".feat"


def _feature_path(data_dir: str, utt_id: str) -> str:
    return os.path.join(data_dir, "features", _feature_name(utt_id))


def _load_split(data_dir: str, split: str) -> corpus.Manifest:
    path = os.path.join(data_dir, SPLIT_FILES[split])
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing manifest {path}; run `emoedit prepare` first")
    return corpus.read_manifest(path, split)


def _find_record(data_dir: str, utt_id: str) -> corpus.UtteranceRecord:
    for split in corpus.SPLITS:
        path = os.path.join(data_dir, SPLIT_FILES[split])
        if os.path.isfile(path):
            for r in corpus.read_manifest(path, split):
                if r.utt_id == utt_id:
                    return r
    raise KeyError(f"utterance {utt_id!r} not found in manifests under {data_dir}")


def _write_features_for(m: corpus.Manifest, data_dir: str, frame_cfg: signal.FrameConfig) -> None:
    os.makedirs(os.path.join(data_dir, "features"), exist_ok=True)
    for r in m.records:
        path = _feature_path(data_dir, r.utt_id)
        if not os.path.exists(path):
            signal.save_features(path, signal.extract_features(signal.load_wav(r.wav_path), frame_cfg))


# ---------------------------------------------------------------- subcommands

def cmd_synth_corpus(args, cfg: RunConfig) -> int:
    out = args.out or cfg.data_root
    emo, neu = synth.write_corpus(out, args.emotional_speakers, args.neutral_speakers,
                                  args.sentences, args.seed)
    print(json.dumps({"emotional_root": emo, "neutral_root": neu}))
    return 0


def cmd_prepare(args, cfg: RunConfig) -> int:
    frame_cfg = cfg.frame_config()
    emo_root = args.emotional or os.path.join(cfg.data_root, "emotional")
    emotional = corpus.ingest_emotional_corpus(emo_root)
    if not emotional.records:
        raise corpus.CorpusError(f"no emotional utterances under {emo_root}")
    neutral = corpus.ingest_neutral_corpus(args.neutral) if args.neutral else None
    if args.held_out_speakers is not None:
        held = {s for s in args.held_out_speakers.split(",") if s}
    elif neutral is not None and neutral.records:
        # unseen test speakers come from the neutral corpus; keep at least one for training
        spk = neutral.speakers()
        held = set(spk[len(spk) - min(args.n_held_out, len(spk) - 1):]) if len(spk) > 1 else set()
    else:
        held = set()
    known = set(emotional.speakers()) | set(neutral.speakers() if neutral else [])
    if held - known:
        raise corpus.CorpusError(f"unknown held-out speaker(s): {sorted(held - known)}")
    train, val, test = corpus.make_splits(
        emotional, held & set(emotional.speakers()), args.val_fraction, args.seed)

    os.makedirs(args.out, exist_ok=True)
    if args.augment_shifts:
        train = augment.augment_emotional(train, args.augment_shifts, os.path.join(args.out, "augmented"))
    if neutral is not None:
        n_train, n_val, n_test = corpus.make_splits(
            neutral, held & set(neutral.speakers()), args.val_fraction, args.seed)
        train = augment.merge_neutral(train, n_train)
        val = augment.merge_neutral(val, n_val)
        test = augment.merge_neutral(test, n_test)
    for m in (train, val, test):
        _write_features_for(m, args.out, frame_cfg)
    table = editor.build_duration_table(train.records)
    write_json_atomic(os.path.join(args.out, "durations.json"), table.to_json())
    for m in (train, val, test):
        corpus.write_manifest(os.path.join(args.out, SPLIT_FILES[m.split]), m)
    summary = {m.split: m.summary() for m in (train, val, test)}
    write_json_atomic(os.path.join(args.out, "summary.json"), summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_augment(args, cfg: RunConfig) -> int:
    m = corpus.read_manifest(args.manifest)
    out = augment.augment_emotional(m, args.shifts, args.out_dir)
    if args.neutral_manifest:
        out = augment.merge_neutral(out, corpus.read_manifest(args.neutral_manifest))
    corpus.write_manifest(args.output, out)
    print(json.dumps(out.summary(), indent=2))
    return 0


def _examples(data_dir: str, m: corpus.Manifest) -> list[training.Example]:
    return [training.Example.from_record(r, signal.load_features(_feature_path(data_dir, r.utt_id)))
            for r in m.records]


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.model.update(_overrides(args, ModelConfig))
    cfg.train.update(_overrides(args, training.TrainConfig))
    try:
        model_cfg = cfg.model_config(toy=args.toy)
        train_cfg = cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    examples = _examples(args.data, _load_split(args.data, "train"))
    os.makedirs(args.out, exist_ok=True)
    metrics = os.path.join(args.out, "metrics.csv")
    model = training.build_model(model_cfg, train_cfg.seed)
    model.set_normalizer([e.feats for e in examples])
    trainer = training.Trainer(model, train_cfg, examples, metrics)
    if args.resume:
        if not os.path.exists(os.path.join(args.out, "trainer_state.pt")):
            raise FileNotFoundError(f"nothing to resume in {args.out}")
        trainer.load_state(args.out)
        logger.info("resumed at step %d", trainer.step)
    elif os.path.exists(metrics):
        os.remove(metrics)
    history = trainer.run(train_cfg.steps, args.out)
    summary = {"steps": trainer.step, "lambda_adv": train_cfg.lambda_adv,
               "final": history[-1] if history else None}
    write_json_atomic(os.path.join(args.out, "train_summary.json"), summary)
    print(json.dumps(summary))
    return 0


def _read_script(path: str) -> editor.EditScript:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        return editor.EditScript.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    except editor.EditError as exc:
        raise UsageError(f"{path}: {exc}")


def cmd_edit(args, cfg: RunConfig) -> int:
    script = _read_script(args.script)
    utt_id = args.utt or script.utt_id
    if not utt_id:
        raise UsageError("no utterance given (use --utt or set utt_id in the script)")
    record = _find_record(args.data, utt_id)
    feats = signal.load_features(_feature_path(args.data, utt_id))
    model = table = None
    if script.needs_model:
        if not args.checkpoint:
            raise UsageError("this edit script inserts or replaces text; --checkpoint is required")
        model = EmoCampNet.load(args.checkpoint)
        with open(os.path.join(args.data, "durations.json"), encoding="utf-8") as f:
            table = editor.DurationTable.from_json(json.load(f))
    if args.all_emotions:
        variants = list(corpus.EMOTIONS)
    else:
        variants = [corpus.EmotionLabel.parse(args.emotion).name if args.emotion else None]

    os.makedirs(args.out, exist_ok=True)
    index = []
    stem = _feature_name(utt_id)[:-len(".feat")]
    for emo in variants:
        result = editor.apply_script(record, feats, script, model, table, emotion=emo)
        name = stem if emo is None else f"{stem}.{emo}"
        feat_path = os.path.join(args.out, f"{name}.feat")
        signal.save_features(feat_path, result.features)
        write_json_atomic(os.path.join(args.out, f"{name}.regions.json"), result.region_map_json())
        wav_path = None
        if not args.no_wav:
            wav_path = os.path.join(args.out, f"{name}.wav")
            signal.save_wav(wav_path, signal.invert_features(result.features))
        used = result.emotion_used
        index.append({"utt_id": utt_id, "name": name, "speaker_id": record.speaker_id,
                      "gender": record.gender, "emotion": emo or (used[0] if used else record.emotion.name),
                      "text": result.text, "features": os.path.abspath(feat_path),
                      "source_features": os.path.abspath(_feature_path(args.data, utt_id)),
                      "wav": wav_path and os.path.abspath(wav_path),
                      "region_map": result.region_map_json()})
    index_path = os.path.join(args.out, "edits.jsonl")
    previous = _read_index(index_path) if os.path.exists(index_path) else []
    names = {e["name"] for e in index}
    merged = [e for e in previous if e["name"] not in names] + index
    write_text_atomic(index_path, "".join(json.dumps(e) + "\n" for e in merged))
    print(json.dumps([{k: e[k] for k in ("name", "emotion", "text")} for e in index], indent=2))
    return 0


def _read_index(path: str) -> list[dict]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing edit index {path}; run `emoedit edit` first")
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _edit_result(entry: dict) -> editor.EditResult:
    regions = [editor.Region(r["source"], r["start"], r["end"], r.get("src_start"), r.get("emotion"))
               for r in entry["region_map"]]
    return editor.EditResult(signal.load_features(entry["features"]), regions, entry.get("text", ""))


def cmd_eval_mcd(args, cfg: RunConfig) -> int:
    entries = _read_index(args.edits)
    report = evalkit.McdReport()
    for e in entries:
        ref_path = (os.path.join(args.reference_dir, _feature_name(e["utt_id"]))
                    if args.reference_dir else e.get("source_features"))
        if not ref_path or not os.path.isfile(ref_path):
            raise FileNotFoundError(f"missing reference features for {e['name']}: {ref_path}")
        report.add(e["name"], e["emotion"], signal.load_features(e["features"]),
                   signal.load_features(ref_path))
    os.makedirs(args.out, exist_ok=True)
    write_csv_atomic(os.path.join(args.out, "mcd.csv"), report.rows, ["utt_id", "emotion", "mcd_db"])
    write_json_atomic(os.path.join(args.out, "mcd_summary.json"), report.summary())
    print(json.dumps(report.summary()))
    return 0


def _plot_f0_curves(entries: list[dict], path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[str, list] = {}
    for e in entries:
        groups.setdefault(e["utt_id"], []).append(e)
    fig, axes = plt.subplots(len(groups), 1, figsize=(8, 2.6 * len(groups)), squeeze=False)
    for ax, (utt, items) in zip(axes[:, 0], sorted(groups.items())):
        for e in items:
            result = _edit_result(e)
            gen = [r for r in result.region_map if r.source == "generated"]
            frames = result.features[gen[0].start:gen[0].end] if gen else result.features
            f0 = signal.features_to_f0(frames)
            t = np.arange(len(f0)) * 0.01
            ax.plot(t, np.where(f0 > 0, f0, np.nan), label=e["emotion"])
        ax.set_title(f"{utt}: F0 of generated region")
        ax.set_xlabel("time (s)")
        ax.set_ylabel("F0 (Hz)")
        ax.legend(fontsize="small")
    fig.tight_layout()
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=100)
    plt.close(fig)
    os.replace(tmp, path)


def cmd_eval_f0(args, cfg: RunConfig) -> int:
    entries = _read_index(args.edits)
    table = evalkit.f0_stats([(_edit_result(e), e["gender"], e["emotion"]) for e in entries])
    os.makedirs(args.out, exist_ok=True)
    write_csv_atomic(os.path.join(args.out, "f0_stats.csv"), table.rows(),
                     ["gender", "emotion", "mean_hz", "std_hz", "n_frames"])
    write_json_atomic(os.path.join(args.out, "f0_stats.json"), table.to_json())
    if not args.no_plot:
        _plot_f0_curves(entries, os.path.join(args.out, "f0_curves.png"))
    print(json.dumps(table.to_json()))
    return 0


def cmd_train_ser(args, cfg: RunConfig) -> int:
    ser = dict(cfg.ser)
    for key in ("epochs", "hidden", "seed"):
        if getattr(args, key) is not None:
            ser[key] = getattr(args, key)
    if args.augment_shifts:
        ser["augment_shifts"] = args.augment_shifts
    try:
        ser_cfg = evalkit.SerConfig.from_dict(ser)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid SER config: {exc}") from None
    model = evalkit.train_ser(corpus.read_manifest(args.manifest), ser_cfg, cfg.frame_config())
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    model.save(args.out)
    print(json.dumps(model.history[-1]))
    return 0


def _plot_confusion(matrix: np.ndarray, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(matrix, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(corpus.EMOTIONS)), corpus.EMOTIONS, rotation=45)
    ax.set_yticks(range(len(corpus.EMOTIONS)), corpus.EMOTIONS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("intended")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.tight_layout()
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=100)
    plt.close(fig)
    os.replace(tmp, path)


def cmd_eval_ser(args, cfg: RunConfig) -> int:
    if not args.ser_model or not os.path.isfile(args.ser_model):
        raise FileNotFoundError(
            f"no trained SER model at {args.ser_model!r}; train one first with "
            "`emoedit train-ser --manifest <train.jsonl> --out <ser.safetensors>`")
    model = evalkit.SerModel.load(args.ser_model)
    entries = _read_index(args.edits)
    matrix = evalkit.confusion_matrix(model, [(_edit_result(e), e["emotion"]) for e in entries])
    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(os.path.join(args.out, "confusion.json"), evalkit.confusion_json(matrix))
    if not args.no_plot:
        _plot_confusion(matrix, os.path.join(args.out, "confusion.png"))
    print(json.dumps(evalkit.confusion_json(matrix)))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="emoedit", parents=[common],
                                description="Emotion-selectable text-based speech editing")
    sub = p.add_subparsers(dest="command", required=True)
    _add_parser = sub.add_parser

    def add_parser(name, **kw):
        return _add_parser(name, parents=[common], **kw)

    sub.add_parser = add_parser

    s = sub.add_parser("synth-corpus", help="write the bundled synthetic ESD/VCTK-style corpus")
    s.add_argument("--out", help="output directory (default: data root)")
    s.add_argument("--emotional-speakers", type=int, default=2)
    s.add_argument("--neutral-speakers", type=int, default=2)
    s.add_argument("--sentences", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("prepare", help="ingest corpora, split, augment, extract features")
    s.add_argument("--emotional", help="emotional corpus root (default: <data root>/emotional)")
    s.add_argument("--neutral", help="neutral corpus root to merge into train")
    s.add_argument("--out", required=True)
    s.add_argument("--held-out-speakers", default=None,
                   help="comma-separated test speakers (default: last --n-held-out neutral speakers)")
    s.add_argument("--n-held-out", type=int, default=4)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--augment-shifts", type=_floats, default=None, help="e.g. -4,-2,2,4")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("augment", help="pitch-shift augmentation of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--shifts", type=_floats, default=list(augment.DEFAULT_SHIFTS))
    s.add_argument("--out-dir", required=True, help="directory for shifted WAVs")
    s.add_argument("--neutral-manifest")
    s.add_argument("--output", required=True, help="output manifest path")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train the editing model")
    s.add_argument("--data", required=True, help="prepared data directory")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--toy", action="store_true", help="small model for CPU runs")
    s.add_argument("--resume", action="store_true")
    _add_dataclass_flags(s, training.TrainConfig)
    _add_dataclass_flags(s, ModelConfig, skip=("vocab_size", "feat_dim", "n_emotions"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("edit", help="apply an edit script to one utterance")
    s.add_argument("--data", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--utt")
    s.add_argument("--checkpoint", help="model.safetensors (not needed for delete-only scripts)")
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--emotion", help="override every op's emotion")
    g.add_argument("--all-emotions", action="store_true", help="one output per emotion")
    s.add_argument("--no-wav", action="store_true")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval-mcd", help="MCD (DTW) of edited features against references")
    s.add_argument("--edits", required=True, help="edits.jsonl written by `edit`")
    s.add_argument("--reference-dir", help="reference .feat files named by utt id (default: sources)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_mcd)

    s = sub.add_parser("eval-f0", help="F0 statistics and curves of generated regions")
    s.add_argument("--edits", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval_f0)

    s = sub.add_parser("train-ser", help="train the speech emotion classifier")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--augment-shifts", type=_floats, default=None)
    s.set_defaults(func=cmd_train_ser)

    s = sub.add_parser("eval-ser", help="confusion matrix of edits under the SER model")
    s.add_argument("--ser-model")
    s.add_argument("--edits", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval_ser)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # parents share action objects, so these stay unset unless given
    args.config = getattr(args, "config", None)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"emoedit: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"emoedit {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
