"""Command-line front end: ``python3 -m afprint <subcommand> ...``.

Every subcommand accepts ``--config file.json`` (fields named like the long
flags, dashes or underscores) and explicit flags override the file.  Outputs
go to ``--run-dir`` together with ``config.json`` and ``log.txt``.

Exit status: 0 success, 1 user error (bad flags, config or inputs), 2
internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import augment, corpusgen, encoder, evalharness, peakfp, pqindex, retrieval
from .dsp import load_wav, save_wav, segment_count, to_mono_8k

log = logging.getLogger("afprint")

SUBCOMMANDS = ("ingest", "train-encoder", "build-index", "build-peak-index", "query",
               "eval-baseline", "eval-proposed", "sweep-pq", "inspect", "synth-corpus")


class UserError(Exception):
    """Bad invocation or input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _ints(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t.strip()]


def _floats(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    return [float(t) for t in str(text).split(",") if t.strip()]


def _strs(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


# (flag, type, default, help) per subcommand; None defaults mean "required or optional input"
_OPTIONS: Dict[str, list] = {
    "synth-corpus": [("out", str, "corpus", "output directory"),
                     ("songs", int, 100, "number of songs"),
                     ("seconds", float, 30.0, "song length"),
                     ("seed", int, 0, "seed offset")],
    "ingest": [("audio_dir", str, None, "directory of WAV files"),
               ("out", str, None, "output directory (default: <run-dir>/songs)")],
    "train-encoder": [("songs", str, None, "song directory"),
                      ("noise", str, None, "training noise directory"),
                      ("ir", str, None, "training impulse-response directory"),
                      ("pipeline", str, "proposed", "augmentation pipeline: proposed or baseline"),
                      ("epochs", int, 20, None), ("steps_per_epoch", int, 16, None),
                      ("batch_pairs", int, 32, None), ("learning_rate", float, 3e-3, None),
                      ("temperature", float, 0.05, None), ("seed", int, 0, None),
                      ("out", str, None, "model path (default: <run-dir>/encoder.npz)")],
    "build-index": [("songs", str, None, "song directory (needs --model)"),
                    ("model", str, None, "encoder .npz"),
                    ("embeddings", str, None, "AFPE embedding file, instead of songs+model"),
                    ("m", int, 32, "sub-quantizers"), ("code_bits", int, 8, "bits per sub-code"),
                    ("coarse_cells", int, 64, None),
                    ("nprobe", int, 4, None), ("seed", int, 0, None),
                    ("out", str, None, "index path (default: <run-dir>/db.afpi)")],
    "build-peak-index": [("songs", str, None, "song directory"),
                         ("out", str, None, "index path (default: <run-dir>/peaks.afph)")],
    "query": [("index", str, None, "AFPI or AFPH index"),
              ("audio", str, None, "query WAV"),
              ("model", str, None, "encoder .npz (default: recorded at build time)"),
              ("top_k", int, 4, None), ("nprobe", int, None, None)],
    "eval-baseline": [("index", str, None, None), ("model", str, None, None),
                      ("songs", str, None, "song directory the index was built from"),
                      ("noise", str, None, "test noise directory"),
                      ("snr", str, "0,5,10,15", "comma-separated dB; 'inf' for clean"),
                      ("lens", str, "1,2,3,4,5", None), ("queries", int, 200, None),
                      ("top_k", int, 4, None), ("seed", int, 0, None)],
    "eval-proposed": [("index", str, None, "AFPI or AFPH index"), ("model", str, None, None),
                      ("songs", str, None, "song directory the index was built from"),
                      ("noise", str, None, "test noise directory"),
                      ("ir", str, None, "test impulse-response directory"),
                      ("levels", str, "low,mid,high", None),
                      ("lens", str, "1,2,3,4,5,10,15", None), ("queries", int, 200, None),
                      ("top_k", int, 4, None), ("seed", int, 0, None)],
    "sweep-pq": [("embeddings", str, None, "AFPE file (self-recall sweep)"),
                 ("m", str, "4,8,16,32,64,128", None), ("coarse_cells", int, 64, None),
                 ("nprobe", int, 4, None), ("sample", int, 500, "queries for self-recall"),
                 ("seed", int, 0, None)],
    "inspect": [("file", str, None, "WAV, NPZ model, AFPI, AFPH or AFPE file")],
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afprint", description="Neural audio fingerprinting toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config; flags override it")
        sp.add_argument("--run-dir", default=None, help=f"output directory (default runs/{name})")
        for flag, typ, _default, help_ in _OPTIONS[name]:
            # defaults are resolved after the config file is merged
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None, help=help_)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {flag: default for flag, _t, default, _h in _OPTIONS[command]}
    types = {flag: typ for flag, typ, _d, _h in _OPTIONS[command]}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UserError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UserError(f"malformed config {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise UserError("config file must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise UserError(f"unknown config field {key!r} for {command}")
            if value is not None and not isinstance(value, (list, tuple)):
                try:
                    value = types[key](value)
                except (TypeError, ValueError):
                    raise UserError(f"config field {key!r} has the wrong type")
            cfg[key] = value
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg["run_dir"] = args.run_dir or str(Path("runs") / command)
    return cfg


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UserError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _song_files(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UserError(f"not a directory: {d}")
    files = sorted(d.glob("*.wav"))
    if not files:
        raise UserError(f"no .wav files in {d}")
    return files


def _load_songs(directory):
    files = _song_files(directory)
    return [to_mono_8k(load_wav(f)) for f in files], files


def _embedder(model_path) -> encoder.EncoderEmbedder:
    return encoder.EncoderEmbedder(encoder.EncoderParams.load(model_path))


def _index_meta_path(index_path) -> Path:
    return Path(str(index_path) + ".meta.json")


def _load_any_index(path):
    data = Path(path).read_bytes()
    if data[:4] == peakfp.PEAK_MAGIC:
        return peakfp.PeakIndex.from_bytes(data)
    if data[:4] == pqindex.INDEX_MAGIC:
        return pqindex.FingerprintIndex.from_bytes(data)
    raise UserError(f"{path} is neither an AFPI nor an AFPH index")


# ---------------------------------------------------------------- subcommands

def cmd_synth_corpus(cfg, run_dir: Path) -> dict:
    written = corpusgen.write_corpus(cfg["out"], cfg["songs"], cfg["seconds"], cfg["seed"])
    summary = {sub: len(paths) for sub, paths in sorted(written.items())}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_ingest(cfg, run_dir: Path) -> dict:
    _need(cfg, "audio_dir")
    out = Path(cfg["out"] or run_dir / "songs")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for sid, f in enumerate(_song_files(cfg["audio_dir"])):
        audio = to_mono_8k(load_wav(f))
        name = f"{sid:05d}.wav"
        save_wav(out / name, audio)
        manifest[sid] = {"source": f.name, "file": name, "duration_s": audio.duration_s,
                         "segments": segment_count(len(audio))}
    pqindex.save_song_metadata(out / "songs.json", manifest)
    print(json.dumps({"songs": len(manifest), "out": str(out)}))
    return {"songs": len(manifest)}


def cmd_train_encoder(cfg, run_dir: Path) -> dict:
    _need(cfg, "songs", "noise", "ir")
    songs, _ = _load_songs(cfg["songs"])
    noise = augment.load_pool(cfg["noise"])
    irs = augment.load_pool(cfg["ir"])
    tcfg = encoder.TrainConfig(batch_pairs=cfg["batch_pairs"], temperature=cfg["temperature"],
                               epochs=cfg["epochs"], steps_per_epoch=cfg["steps_per_epoch"],
                               learning_rate=cfg["learning_rate"], pipeline=cfg["pipeline"],
                               seed=cfg["seed"])
    result = encoder.train(songs, noise, irs, augment.AugmentConfig(rng_seed=cfg["seed"]), tcfg)
    out = Path(cfg["out"] or run_dir / "encoder.npz")
    result.params.save(out)
    (run_dir / "loss.json").write_text(json.dumps(result.loss_history))
    print(json.dumps({"model": str(out), "final_loss": result.loss_history[-1]}))
    return {"loss_history": result.loss_history}


def cmd_build_index(cfg, run_dir: Path) -> dict:
    icfg = pqindex.IndexConfig(m=cfg["m"], code_bits=cfg["code_bits"], coarse_cells=cfg["coarse_cells"], nprobe=cfg["nprobe"],
                               seed=cfg["seed"])
    meta = {}
    if cfg["embeddings"]:
        rows = encoder.import_embeddings(cfg["embeddings"], expected_dim=icfg.dim)
        refs = [r for r, _ in rows]
        emb = np.stack([e for _, e in rows]).astype(np.float64)
    else:
        _need(cfg, "songs", "model")
        songs, files = _load_songs(cfg["songs"])
        emb, refs = evalharness.embed_songs(songs, _embedder(cfg["model"]))
        meta = {"model": str(Path(cfg["model"]).resolve()), "songs_dir": str(Path(cfg["songs"]).resolve()),
                "songs": {i: f.name for i, f in enumerate(files)}}
    index = pqindex.FingerprintIndex.build(emb, refs, icfg)
    out = Path(cfg["out"] or run_dir / "db.afpi")
    index.save(out)
    _index_meta_path(out).write_text(json.dumps(meta, sort_keys=True, indent=1))
    code_b, ser_b = index.size_report()
    print(json.dumps({"index": str(out), "vectors": len(index), "code_bytes": code_b, "file_bytes": ser_b}))
    return {"vectors": len(index)}


def cmd_build_peak_index(cfg, run_dir: Path) -> dict:
    _need(cfg, "songs")
    songs, files = _load_songs(cfg["songs"])
    index = peakfp.PeakIndex()
    for sid, s in enumerate(songs):
        index.add_song(sid, s)
    out = Path(cfg["out"] or run_dir / "peaks.afph")
    index.save(out)
    _index_meta_path(out).write_text(json.dumps({"songs": {i: f.name for i, f in enumerate(files)}}))
    print(json.dumps({"index": str(out), "hashes": len(index)}))
    return {"hashes": len(index)}


def _model_for(cfg) -> str:
    if cfg.get("model"):
        return cfg["model"]
    meta_path = _index_meta_path(cfg["index"])
    if meta_path.exists():
        model = json.loads(meta_path.read_text()).get("model")
        if model:
            return model
    raise UserError("no --model given and none recorded next to the index")


def cmd_query(cfg, run_dir: Path) -> dict:
    _need(cfg, "index", "audio")
    index = _load_any_index(cfg["index"])
    audio = to_mono_8k(load_wav(cfg["audio"]))
    if isinstance(index, peakfp.PeakIndex):
        ranked = index.match(peakfp.fingerprint(audio, index.params))
        out = {"winner": ranked[0].song_id if ranked else None,
               "votes": {str(r.song_id): r.votes for r in ranked}}
    else:
        if cfg["nprobe"]:
            index.config = pqindex.IndexConfig(**{**index.config.__dict__, "nprobe": cfg["nprobe"]})
        if audio.duration_s < 1.0:
            raise UserError("query must be at least 1 s long")
        res = retrieval.identify(audio, index, _embedder(_model_for(cfg)), cfg["top_k"])
        out = {"winner": res.winner, "votes": {str(k): v for k, v in sorted(res.votes.items())},
               "tie_broken": res.tie_broken}
    print(json.dumps(out, sort_keys=True))
    (run_dir / "result.json").write_text(json.dumps(out, sort_keys=True))
    return out


def _write_report(report: evalharness.EvalReport, run_dir: Path) -> None:
    report.write(run_dir)
    print(report.to_csv(), end="")


def cmd_eval_baseline(cfg, run_dir: Path) -> dict:
    _need(cfg, "index", "songs", "noise")
    index = _load_any_index(cfg["index"])
    if not isinstance(index, pqindex.FingerprintIndex):
        raise UserError("eval-baseline needs an AFPI embedding index")
    songs, _ = _load_songs(cfg["songs"])
    noise = augment.load_pool(cfg["noise"])
    report = evalharness.run_baseline_eval(
        songs, index, _embedder(_model_for(cfg)), _floats(cfg["snr"]), _floats(cfg["lens"]), noise,
        cfg["queries"], cfg["seed"], cfg["top_k"])
    _write_report(report, run_dir)
    return {"rows": len(report.rows)}


def cmd_eval_proposed(cfg, run_dir: Path) -> dict:
    _need(cfg, "index", "songs", "noise", "ir")
    index = _load_any_index(cfg["index"])
    songs, _ = _load_songs(cfg["songs"])
    noise, irs = augment.load_pool(cfg["noise"]), augment.load_pool(cfg["ir"])
    clean = evalharness.build_concert(songs)
    levels = _strs(cfg["levels"])
    lens = _floats(cfg["lens"])
    report = evalharness.EvalReport(config={k: cfg[k] for k in sorted(cfg) if k != "run_dir"})
    for level in levels:
        rec = evalharness.simulate_recording(clean, level, noise, irs, cfg["seed"])
        if isinstance(index, peakfp.PeakIndex):
            evalharness.evaluate_song_accuracy(rec, index.identify, lens, cfg["queries"], cfg["seed"],
                                               "peaks", report)
        else:
            evalharness.run_proposed_eval(rec, index, _embedder(_model_for(cfg)), lens, cfg["queries"],
                                          cfg["top_k"], cfg["seed"], "encoder", report)
    _write_report(report, run_dir)
    return {"rows": len(report.rows)}


def cmd_sweep_pq(cfg, run_dir: Path) -> dict:
    _need(cfg, "embeddings")
    rows = encoder.import_embeddings(cfg["embeddings"])
    refs = [r for r, _ in rows]
    emb = np.stack([e for _, e in rows]).astype(np.float64)
    base = pqindex.IndexConfig(dim=emb.shape[1], m=1, coarse_cells=cfg["coarse_cells"],
                               nprobe=cfg["nprobe"], seed=cfg["seed"])
    report, sizes = evalharness.quantization_sweep(
        emb, refs, _ints(cfg["m"]), evalharness.self_recall_eval(emb, refs, cfg["sample"], cfg["seed"]), base)
    _write_report(report, run_dir)
    (run_dir / "sizes.csv").write_text(evalharness.sizes_csv(sizes))
    (run_dir / "plot_recall_vs_code_length.csv").write_text(
        "code_length_bits,value\n" + "".join(f"{r['code_length_bits']},{r['value']}\n" for r in report.rows))
    return {"rows": len(report.rows)}


def cmd_inspect(cfg, run_dir: Path) -> dict:
    _need(cfg, "file")
    path = Path(cfg["file"])
    data = path.read_bytes()
    head = data[:4]
    if head == pqindex.INDEX_MAGIC:
        idx = pqindex.FingerprintIndex.from_bytes(data)
        code_b, ser_b = idx.size_report()
        info = {"type": "AFPI", "vectors": len(idx), "config": idx.config.__dict__,
                "code_bytes": code_b, "file_bytes": ser_b,
                "songs": len({int(e["song_id"]) for c in range(idx.config.coarse_cells) for e in idx.cell(c)})}
    elif head == peakfp.PEAK_MAGIC:
        idx = peakfp.PeakIndex.from_bytes(data)
        info = {"type": "AFPH", "hashes": len(idx), "songs": int(len(np.unique(idx.table["song_id"])))}
    elif head == encoder.EMB_MAGIC:
        rows = encoder.import_embeddings(path)
        info = {"type": "AFPE", "rows": len(rows), "dim": int(len(rows[0][1])) if rows else 0}
    elif head == b"RIFF":
        audio = load_wav(path)
        info = {"type": "WAV", "sample_rate_hz": audio.sample_rate_hz, "duration_s": audio.duration_s,
                "segments_at_8k": segment_count(int(round(audio.duration_s * 8000)))}
    elif head[:2] == b"PK":
        params = encoder.EncoderParams.load(path)
        info = {"type": "encoder", "n_params": params.n_params(), "config": params.config.to_json()}
    else:
        raise UserError(f"unrecognised file type: {path}")
    print(json.dumps(info, sort_keys=True, default=str))
    return info


_HANDLERS = {
    "synth-corpus": cmd_synth_corpus, "ingest": cmd_ingest, "train-encoder": cmd_train_encoder,
    "build-index": cmd_build_index, "build-peak-index": cmd_build_peak_index, "query": cmd_query,
    "eval-baseline": cmd_eval_baseline, "eval-proposed": cmd_eval_proposed, "sweep-pq": cmd_sweep_pq,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    handler = None
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UserError("a subcommand is required: " + ", ".join(SUBCOMMANDS))
        cfg = resolve_config(args.command, args)
        run_dir = Path(cfg["run_dir"])
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps({"command": args.command, **cfg}, sort_keys=True, indent=1))
        handler = logging.FileHandler(run_dir / "log.txt", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        log.info("%s %s", args.command, json.dumps(cfg, sort_keys=True))
        _HANDLERS[args.command](cfg, run_dir)
        return 0
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        log.error("missing file: %s", e)
        return 1
    except (UserError, IsADirectoryError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        log.error("user error: %s", e)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        log.exception("internal error")
        return 2
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
