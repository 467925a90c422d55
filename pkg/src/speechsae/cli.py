"""Command-line entry point: ``speechsae <command> [options]``.

Every command accepts ``--seed`` and ``--config FILE``. The config file is flat
``key = value`` text whose keys are option names; an option given on the
command line wins over the config and a warning is printed.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, autolabel, ingest, report, sae, steering, synthbench, trainer
from .errors import InputError, SpeechSaeError

log = logging.getLogger("speechsae")

REQUIRED = {
    "ingest": ("manifest", "out"),
    "synth": ("out",),
    "train": ("store", "out"),
    "index": ("store", "model", "out"),
    "analyze pr": ("index", "latent", "feature"),
    "analyze positional": ("index", "latent"),
    "analyze top-units": ("store", "index", "latent"),
    "analyze confusion": ("store", "index", "latent"),
    "steer": ("model", "in_path", "latent", "mode", "out"),
    "label": ("store", "index", "out"),
    "score": ("model", "dict"),
    "report": ("store", "index", "latent", "out"),
}


class UsageError(Exception):
    pass


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(_name=name, _parser=p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechsae", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="trim embeddings listed in a manifest into a store")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--frame-rate", type=int, default=ingest.FRAME_RATE)
    _common(p, "ingest")

    p = sub.add_parser("synth", help="write a planted-dictionary corpus in ingest format")
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--atoms", type=int, default=512)
    p.add_argument("--sparsity", type=int, default=8)
    p.add_argument("--files", type=int, default=400)
    p.add_argument("--frames-per-file", type=int, default=500)
    p.add_argument("--lo", type=float, default=0.5)
    p.add_argument("--hi", type=float, default=1.5)
    p.add_argument("--noise-sd", type=float, default=0.01)
    p.add_argument("--word-atoms", type=int, default=0)
    p.add_argument("--foreign-fraction", type=float, default=0.0)
    p.add_argument("--language-atom", type=int, default=None)
    p.add_argument("--pad-to", type=int, default=None)
    p.add_argument("--out")
    _common(p, "synth")

    p = sub.add_parser("train", help="train a sparse autoencoder on a store")
    p.add_argument("--store")
    p.add_argument("--d-latent", type=int, default=16000)
    p.add_argument("--k", type=int, default=45)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--shuffle-buffer", type=int, default=65_536)
    p.add_argument("--dead-window", type=int, default=1_000_000)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--out")
    _common(p, "train")

    p = sub.add_parser("index", help="build the inverted activation index")
    p.add_argument("--store")
    p.add_argument("--model")
    p.add_argument("--out")
    _common(p, "index")

    p = sub.add_parser("analyze", help="feature statistics over an index")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("pr", help="precision/recall for a hypothesized feature")
    a.add_argument("--feature", help="lang:non-<tag> | tag:<name> | word:<text>")
    a.add_argument("--span-level", action="store_true")
    a.add_argument("--lenient", action="store_true")
    a.add_argument("--unit", default="word")
    ap = asub.add_parser("positional", help="mean/SD of activation time")
    at = asub.add_parser("top-units", help="rank words or phones by active frames")
    at.add_argument("--unit", default="word", choices=("word", "phone"))
    at.add_argument("--min-occurrences", type=int, default=3)
    at.add_argument("--top", type=int, default=5)
    ac = asub.add_parser("confusion", help="2x2 confusion of a latent threshold predictor")
    ac.add_argument("--positive-tag", default="noise")
    ac.add_argument("--negative-label", default="voice")
    ac.add_argument("--threshold", type=float, default=0.0)
    for name, sp in (("pr", a), ("positional", ap), ("top-units", at), ("confusion", ac)):
        sp.add_argument("--store")
        sp.add_argument("--index")
        sp.add_argument("--latent", type=int)
        sp.add_argument("--out", default=None)
        _common(sp, f"analyze {name}")

    p = sub.add_parser("steer", help="edit one latent and write the steered embedding")
    p.add_argument("--model")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--latent", type=int)
    p.add_argument("--mode", choices=steering.MODES)
    p.add_argument("--magnitude", type=float, default=None)
    p.add_argument("--index", default=None, help="used for the default magnitude")
    p.add_argument("--frames", default=None, help="all | active-only | comma-separated frame list")
    p.add_argument("--duration", type=float, default=None, help="real audio length; later frames are padding")
    p.add_argument("--out")
    _common(p, "steer")

    p = sub.add_parser("label", help="automated latent labeling")
    p.add_argument("--store")
    p.add_argument("--index")
    p.add_argument("--latents", default=None, help="e.g. 0-49,100; default all active latents")
    p.add_argument("--mock", default=None, help="directory of canned responses, or 'builtin'")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--csv", default=None)
    p.add_argument("--out")
    _common(p, "label")

    p = sub.add_parser("score", help="dictionary recovery of a model against a planted dictionary")
    p.add_argument("--model")
    p.add_argument("--dict")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--optimal", action="store_true")
    p.add_argument("--out", default=None)
    _common(p, "score")

    p = sub.add_parser("report", help="highlighted transcripts of a latent's strongest files")
    p.add_argument("--store")
    p.add_argument("--index")
    p.add_argument("--latent", type=int)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--format", choices=("html", "text"), default="html")
    p.add_argument("--out")
    _common(p, "report")
    return parser


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    given = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                given.add(action.dest)
    return given


def _convert(parser: argparse.ArgumentParser, dest: str, raw: str):
    for action in parser._actions:
        if action.dest != dest:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            return raw.lower() in ("1", "true", "yes", "on")
        value = action.type(raw) if action.type else raw
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config value {raw!r} for {dest} not in {list(action.choices)}")
        return value
    raise KeyError(dest)


def apply_config(args: argparse.Namespace, argv: list[str]) -> None:
    if not args.config:
        return
    leaf = args._parser
    explicit = _explicit_dests(leaf, argv)
    for key, raw in read_config(args.config).items():
        if key in ("config", "_name", "_parser") or not hasattr(args, key):
            log.warning("config key %r is not an option of %s; ignored", key, args._name)
            continue
        if key in explicit:
            log.warning("--%s given on the command line overrides the config value", key.replace("_", "-"))
            print(f"warning: --{key.replace('_', '-')} overrides config value {raw!r}", file=sys.stderr)
            continue
        setattr(args, key, _convert(leaf, key, raw))


class OutputManifest:
    """Records every artifact a command writes, with its SHA-256, in ``MANIFEST.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path = self.directory / "MANIFEST.json"
        self.entries = json.loads(self.path.read_text()) if self.path.exists() else {}

    def add(self, path) -> None:
        path = Path(path)
        rel = path.resolve().relative_to(self.directory.resolve()).as_posix()
        self.entries[rel] = hashlib.sha256(path.read_bytes()).hexdigest()

    def add_tree(self, root) -> None:
        for p in sorted(Path(root).rglob("*")):
            if p.is_file() and p.name not in ("MANIFEST.json", "run.log"):
                self.add(p)

    def write(self, command: str) -> None:
        self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True) + "\n")
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        with open(self.directory / "run.log", "a", encoding="utf-8") as fh:
            fh.write(f"{stamp}\t{command}\n")


def _emit(record: dict, out) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(line + "\n")
        m = OutputManifest(out.parent)
        m.add(out)
        m.write(" ".join(sys.argv[1:]))


def parse_latents(spec: str | None, d_latent: int, index: analysis.ActivationIndex) -> list[int]:
    if not spec:
        return [int(i) for i in np.flatnonzero(index.latent_counts())]
    out = set()
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.update(range(int(a), int(b) + 1))
        elif part:
            out.add(int(part))
    bad = [i for i in out if not 0 <= i < d_latent]
    if bad:
        raise InputError(f"latent ids out of range: {bad[:5]}")
    return sorted(out)


def _feature_annotation(feature: str, store: ingest.Store | None, index):
    kind, _, value = feature.partition(":")
    if kind == "lang":
        if store is None:
            raise UsageError("lang: features need --store")
        ref = value[len("non-"):] if value.startswith("non-") else value
        ref = {"english": "en", "spanish": "es", "french": "fr"}.get(ref, ref)
        return analysis.annotation_from_language(index.files, store.meta(), ref)
    if kind == "tag":
        if store is None:
            raise UsageError("tag: features need --store")
        tags = {e.file_id: e.tags for e in store.manifest.entries if e.file_id in set(index.files)}
        return analysis.annotation_from_tags(feature, tags, value)
    if kind == "word":
        if store is None:
            raise UsageError("word: features need --store")
        return analysis.annotation_from_word(store.alignments(), value)
    raise UsageError(f"unknown feature kind {kind!r}; use lang:, tag: or word:")


def cmd_ingest(args) -> None:
    st = ingest.ingest_corpus(args.manifest, args.out, args.frame_rate)
    m = OutputManifest(args.out)
    m.add_tree(args.out)
    m.write("ingest")
    print(json.dumps({"files": len(st.manifest.entries), "dim": st.dim, "store": str(args.out)}))


def cmd_synth(args) -> None:
    d = synthbench.make_dictionary(args.d_in, args.atoms, args.sparsity, args.lo, args.hi, args.noise_sd, args.seed)
    corpus = synthbench.generate(
        d,
        args.files,
        args.frames_per_file,
        n_word_atoms=args.word_atoms,
        language_atom=args.language_atom,
        foreign_fraction=args.foreign_fraction,
    )
    synthbench.write_corpus(corpus, args.out, pad_to=args.pad_to)
    m = OutputManifest(args.out)
    m.add_tree(args.out)
    m.write("synth")
    print(json.dumps({"files": args.files, "frames": args.files * args.frames_per_file, "out": str(args.out)}))


def cmd_train(args) -> None:
    store = ingest.Store.open(args.store)
    sc = sae.SaeConfig(store.dim, args.d_latent, args.k)
    tc = trainer.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        renormalize_decoder=not args.no_renormalize,
        dead_window=args.dead_window,
        shuffle_buffer=args.shuffle_buffer,
        log_every=args.log_every,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats_path = out.with_name(out.name + ".stats.jsonl")
    with open(stats_path, "w", encoding="utf-8", newline="\n") as fh:
        def on_stats(s):
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")

        result = trainer.train(store.iter_frames, sc, tc, on_stats)
    sae.save_checkpoint(out, result.params, sc.k)
    m = OutputManifest(out.parent)
    m.add(out)
    m.add(stats_path)
    m.write("train")
    last = result.stats[-1].to_record() if result.stats else {}
    print(json.dumps({"model": str(out), **last}, sort_keys=True))


def cmd_index(args) -> None:
    store = ingest.Store.open(args.store)
    params, k = sae.load_checkpoint(args.model)
    idx = analysis.build_index(store, params, k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.save_index(out, idx)
    m = OutputManifest(out.parent)
    m.add(out)
    m.add(str(out) + ".json")
    m.write("index")
    print(json.dumps({"index": str(out), "files": len(idx.files), "postings": len(idx.postings)}))


def _frame_rate(store) -> int:
    return store.frame_rate if store is not None else ingest.FRAME_RATE


def cmd_analyze(args) -> None:
    idx = analysis.load_index(args.index)
    store = ingest.Store.open(args.store) if args.store else None
    rate = _frame_rate(store)
    name = args.analysis
    rec: dict = {"analysis": name, "latent": args.latent}
    if name == "pr":
        ann = _feature_annotation(args.feature, store, idx)
        rec["feature"] = args.feature
        if args.span_level:
            if store is None:
                raise UsageError("--span-level needs --store")
            als = store.alignments()
            strict = analysis.span_precision_recall(idx, args.latent, ann, als, args.unit, False, rate)
            lenient = analysis.span_precision_recall(idx, args.latent, ann, als, args.unit, True, rate)
            rec["strict"] = strict.to_record()
            rec["lenient"] = lenient.to_record()
        else:
            rec.update(analysis.precision_recall(idx, args.latent, ann).to_record())
    elif name == "positional":
        ps = analysis.positional_stats(idx, args.latent, rate)
        rec.update({"n": 0} if ps is None else {"mean_time": ps.mean_time, "sd_time": ps.sd_time, "n": ps.n})
    elif name == "top-units":
        res = analysis.top_units(idx, args.latent, store.alignments(), args.unit, args.min_occurrences, rate)
        rec["skipped_files"] = res.skipped_files
        rec["units"] = [
            {"text": r.text, "mean_active_frames": r.mean_active_frames, "occurrences": r.occurrences,
             "phones": dict(r.phone_breakdown)}
            for r in res.rankings[: args.top]
        ]
    elif name == "confusion":
        rule = analysis.ThresholdRule(args.latent, args.threshold, args.positive_tag, args.negative_label)
        entries = store.manifest.by_id()
        labels = {
            f: (args.positive_tag if args.positive_tag in entries[f].tags else args.negative_label)
            for f in idx.files
            if f in entries
        }
        rec.update(analysis.confusion_binary(idx, rule, labels).to_record())
    _emit(rec, args.out)


def cmd_steer(args) -> None:
    params, k = sae.load_checkpoint(args.model)
    seq = ingest.load_embedding_file(args.in_path)
    magnitude = args.magnitude
    if magnitude is None:
        if args.index is None:
            raise UsageError("--magnitude is required unless --index is given")
        magnitude = steering.default_magnitude(analysis.load_index(args.index), args.latent)
    frames = args.frames
    if frames is None:
        frames = "all"
    elif frames not in ("all", "active-only"):
        frames = tuple(int(f) for f in frames.split(",") if f.strip())
    n_real = ingest.frames_for_duration(args.duration) if args.duration else None
    spec = steering.SteerSpec(args.latent, args.mode, magnitude, frames)
    res = steering.steer(seq, params, k, spec, n_real)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.write_embedding_file(out, res.modified.frames)
    m = OutputManifest(out.parent)
    m.add(out)
    m.write("steer")
    print(json.dumps({"out": str(out), "frames_touched": res.frames_touched, "magnitude": magnitude,
                      "max_l2_delta": float(res.l2_delta.max())}, sort_keys=True))


def cmd_label(args) -> None:
    store = ingest.Store.open(args.store)
    idx = analysis.load_index(args.index)
    if args.mock:
        client = autolabel.MockChatClient(None if args.mock == "builtin" else args.mock)
    else:
        client = autolabel.ChatClient.from_env()
    latents = parse_latents(args.latents, idx.d_latent, idx)
    transcripts = {f: m.transcript for f, m in store.meta().items() if m.transcript is not None}
    failures = []
    records = autolabel.label_latents(
        latents, idx, transcripts, store.alignments(), client, args.seed, args.workers, store.frame_rate,
        on_error=lambda lid, exc: failures.append((lid, exc)),
    )
    for lid, exc in failures:
        print(f"warning: latent {lid}: {type(exc).__name__}: {exc}", file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    autolabel.write_records(out, records)
    m = OutputManifest(out.parent)
    m.add(out)
    if args.csv:
        autolabel.export_csv(args.csv, records)
        m.add(args.csv)
    m.write("label")
    print(json.dumps({"records": len(records), "retained": sum(r.retained for r in records),
                      "failed": len(failures)}))


def cmd_score(args) -> None:
    params, _ = sae.load_checkpoint(args.model)
    d = synthbench.load_dictionary(args.dict)
    r = synthbench.recovery_score(params, d, args.threshold, args.optimal)
    _emit({"matched_fraction": r.matched_fraction, "mean_best_cosine": r.mean_best_cosine,
           "threshold": r.threshold}, args.out)


def cmd_report(args) -> None:
    store = ingest.Store.open(args.store)
    idx = analysis.load_index(args.index)
    files = report.top_files(idx, args.latent, args.top)
    transcripts = {f: m.transcript for f, m in store.meta().items() if m.transcript is not None}
    docs = report.highlight_docs(idx, args.latent, files, transcripts, store.alignments(), store.frame_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = OutputManifest(out)
    ext = "html" if args.format == "html" else "txt"
    for rank, doc in enumerate(docs, 1):
        body = report.render_highlight(doc) if args.format == "html" else report.render_plain(doc)
        path = out / f"latent{args.latent}_rank{rank:02d}_{doc.file_id}.{ext}"
        path.write_text(body + "\n", encoding="utf-8")
        m.add(path)
    m.write("report")
    print(json.dumps({"latent": args.latent, "docs": len(docs), "out": str(out)}))


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "index": cmd_index,
    "analyze": cmd_analyze,
    "steer": cmd_steer,
    "label": cmd_label,
    "score": cmd_score,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_config(args, argv)
        missing = [n for n in REQUIRED.get(args._name, ()) if getattr(args, n, None) is None]
        if missing:
            raise UsageError(f"{args._name}: missing required option(s): "
                             + ", ".join("--" + ("in" if n == "in_path" else n.replace("_", "-")) for n in missing))
    except (UsageError, ValueError, OSError) as exc:
        args._parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (SpeechSaeError, OSError, KeyError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
