"""Command-line entry point.

Human-readable output goes to stdout; on failure a single JSON object
``{"error": kind, "message": ..., "exit_code": n}`` goes to stderr and the
process exits with 2 (usage/config), 3 (data), 4 (numeric) or 5 (state).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import container
from .config import REGIONS, Config, load_plan
from .errors import ConfigError, DataError, StreamGestureError

METRICS = ("fgd", "div", "bc", "mse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--config", default=None, help="plan file (key = value lines)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="streamgesture")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write one synthetic session")
    _common(p)
    p.add_argument("--duration", type=float, default=10.0)

    p = sub.add_parser("train", help="run the four-stage curriculum into a bundle directory")
    _common(p, seed_default=None)
    p.add_argument("--sessions", default=None, help="directory of .sgs sessions (default: synthesise)")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")

    p = sub.add_parser("stream", help="chunked generation from audio")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--audio", required=True, help="WAV, '-' for raw s16le PCM on stdin, .sgs session "
                                                  "or a .sgc container with a 'mel' array")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--cond-only", action="store_true", help="skip the null-conditioned pass")
    p.add_argument("--latency-out", default=None)

    p = sub.add_parser("probe", help="causality and latency probes")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--audio", default=None, help="audio to probe (default: a synthetic session)")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--duration", type=float, default=6.0)

    p = sub.add_parser("eval", help="metrics between real and generated motion")
    _common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True, nargs="+")
    p.add_argument("--metrics", default=",".join(METRICS))
    p.add_argument("--sigma", type=float, default=0.1)

    p = sub.add_parser("report", help="render a runlog (and optional latency JSON) to PNG + table")
    _common(p)
    p.add_argument("--runlog", required=True)
    p.add_argument("--latency", default=None)
    return ap


def _config(args, base: Config | None = None) -> Config:
    cfg = load_plan(args.config, base)
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthdata import default_specs, gen_session
    if not args.duration > 0:
        raise ConfigError("--duration must be positive")
    cfg = _config(args, Config.desk())
    s = gen_session(args.seed, args.duration, default_specs(cfg), cfg.frame_rate, cfg.sample_rate,
                    cfg.n_symbols)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        sha = s.save(out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    _, manifest = s.to_arrays()
    _emit({"file": str(out), "sha256": sha, **manifest, "n_beats": int(len(s.beat_times))})
    return 0


def cmd_train(args) -> int:
    from .synthdata import SynthSession, list_sessions
    from .trainorch import TrainPlan, run_plan
    base = Config.desk() if args.desk else Config()
    cfg = _config(args, base)
    if args.seed is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "seed": args.seed})
    sessions = None
    if args.sessions:
        files = list_sessions(args.sessions)
        if not files:
            raise DataError(f"no .sgs sessions in {args.sessions}")
        sessions = [SynthSession.load(f) for f in files]
    bundle = run_plan(TrainPlan(cfg), sessions, args.out)
    _emit({"bundle": args.out, "config_hash": cfg.hash(),
           "heldout_metrics": bundle.manifest.get("heldout_metrics", {})})
    return 0


def _audio_input(path: str, cfg: Config):
    """Returns ("wave", samples) or ("mel", frames)."""
    from .audioenc import load_audio
    from .synthdata import SynthSession
    if path == "-":
        raw = sys.stdin.buffer.read()
        return "wave", np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such audio input {p}")
    if p.suffix == ".sgs":
        return "wave", SynthSession.load(p).waveform
    if p.suffix == ".sgc":
        arrays, _ = container.load(p)
        if "mel" not in arrays:
            raise DataError(f"{p} has no 'mel' array")
        return "mel", np.asarray(arrays["mel"], dtype=np.float64)
    return "wave", load_audio(p, cfg)


def write_pose_stream(path, poses: dict, stamps: np.ndarray, manifest: dict) -> str | None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if p.suffix in (".ndjson", ".jsonl"):
        with p.open("w") as f:
            for i, t in enumerate(stamps):
                for r in REGIONS:
                    f.write(json.dumps({"timestamp": round(float(t), 6), "frame": i, "region": r,
                                        "values": [float(v) for v in poses[r][i]]}) + "\n")
        return None
    arrays = {f"pose/{r}": poses[r] for r in REGIONS}
    arrays["timestamps"] = np.asarray(stamps, dtype=np.float64)
    return container.save(p, arrays, manifest)


def cmd_stream(args) -> int:
    from .bundle import Bundle
    from .stream import open_session, split_chunks
    if not Path(args.bundle).exists():
        raise DataError(f"no bundle at {args.bundle}")
    bundle = Bundle.load(args.bundle)
    cfg = bundle.cfg
    kind, data = _audio_input(args.audio, cfg)
    s = open_session(bundle, args.seed, args.gamma, cond_only=args.cond_only)
    out = {r: [] for r in REGIONS}
    stamps = []
    chunks = split_chunks(data, cfg.chunk_samples) if kind == "wave" else \
        [data[i:i + cfg.mels_per_token] for i in range(0, len(data) - cfg.mels_per_token + 1, cfg.mels_per_token)]
    first = None
    for j, c in enumerate(chunks):
        t0 = s.clock()
        y = s.push_audio_chunk(c) if kind == "wave" else s.push_mel_frames(c)
        if first is None:
            first = (s.clock() - t0) * 1000.0
        for r in REGIONS:
            out[r].append(y[r])
        stamps += [(j + 1) * cfg.chunk_ms / 1000.0] * len(y[REGIONS[0]])
    if not chunks:
        raise DataError("audio is empty")
    poses = {r: np.concatenate(v) for r, v in out.items()}
    from .stream import LatencyReport
    rep = LatencyReport(float(cfg.chunk_ms), first, list(s.compute_ms)).to_dict()
    manifest = {"kind": "pose_stream", "seed": args.seed, "gamma": s.gamma, "cond_only": s.cond_only,
                "frame_rate": cfg.frame_rate, "tokens": s.tokens,
                "bundle_config_hash": bundle.cfg.hash()}
    write_pose_stream(args.out, poses, np.asarray(stamps), manifest)
    lat_path = Path(args.latency_out) if args.latency_out else Path(str(args.out) + ".latency.json")
    lat_path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    _emit({"out": args.out, "latency": str(lat_path), "n_chunks": len(chunks),
           "frames_per_region": int(len(stamps)), "tokens_per_region": len(s.tokens[REGIONS[0]]),
           "per_chunk_compute_ms_mean": rep["per_chunk_compute_ms"]["mean"],
           "real_time_factor": rep["real_time_factor"]})
    return 0


def cmd_probe(args) -> int:
    from .bundle import Bundle
    from .stream import causality_probe, latency_report, open_session, stream_generate
    from .synthdata import default_specs, gen_session
    bundle = Bundle.load(args.bundle)
    cfg = bundle.cfg
    if args.audio:
        kind, x = _audio_input(args.audio, cfg)
        if kind != "wave":
            raise DataError("probe needs a waveform input")
    else:
        x = gen_session(args.seed, args.duration, default_specs(cfg), cfg.frame_rate,
                        cfg.sample_rate, cfg.n_symbols).waveform
    duration = len(x) / cfg.sample_rate
    rng = np.random.default_rng(args.seed)
    points = np.sort(rng.uniform(0.0, duration, args.points))

    def gen(audio, until=None):
        p, st, _ = stream_generate(bundle, audio, args.seed, until=until)
        return p, st

    ref = gen(x)
    results = [bool(causality_probe(gen, x, float(t), cfg.sample_rate, seed=i, reference=ref))
               for i, t in enumerate(points)]
    rep = latency_report(open_session(bundle, args.seed), x).to_dict()
    out = {"causality": {"points": [float(t) for t in points], "passed": results, "all_passed": all(results)},
           "latency": rep}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit({"all_passed": all(results), "n_points": len(results),
           "per_chunk_compute_ms_mean": rep["per_chunk_compute_ms"]["mean"]})
    return 0 if all(results) else 4


def _load_motion(path):
    """(poses per region, frame rate, audio beats or None) from a session or pose-stream file."""
    from .synthdata import SynthSession
    arrays, m = container.load(path)
    if m.get("kind") == "session":
        s = SynthSession.load(path)
        return s.poses, s.frame_rate, s.beat_times
    if m.get("kind") == "pose_stream":
        return {k[5:]: v for k, v in arrays.items() if k.startswith("pose/")}, m["frame_rate"], None
    raise DataError(f"{path}: not a session or pose stream")


def cmd_eval(args) -> int:
    from .evalmetrics import (BeatSet, beat_constancy, detect_motion_beats, featurize, fgd,
                              l1_diversity, metric_record, motion_windows, param_mse)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in wanted if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    real, fr, beats = _load_motion(args.real)
    gens = [_load_motion(g) for g in args.gen]
    cat = lambda p: np.concatenate([p[r] for r in REGIONS if r in p], axis=1)  # noqa: E731
    R = cat(real)
    G = [cat(g[0]) for g in gens]
    seeds = {"featurizer": args.seed}
    records = []
    for name in wanted:
        if name == "fgd":
            v = fgd(featurize(motion_windows(R), args.seed),
                    featurize(np.concatenate([motion_windows(g) for g in G]), args.seed))
        elif name == "div":
            if len(G) < 2:
                raise DataError("div needs at least 2 generations")
            T = min(len(g) for g in G)
            v = l1_diversity(np.stack([g[:T] for g in G]))
        elif name == "bc":
            if beats is None:
                raise DataError("bc needs audio beats: pass a session file as --real")
            ab = BeatSet(np.asarray(beats), args.sigma)
            vals = [beat_constancy(detect_motion_beats(g[0]["upper_body"], g[1], args.sigma), ab, args.sigma)
                    for g in gens]
            v = float(np.mean(vals))
        else:
            T = min(len(R), *(len(g) for g in G))
            v = float(np.mean([param_mse(R[:T], g[:T]) for g in G]))
        records.append(metric_record(name, v, {"sigma": args.sigma}, seeds))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    _emit({r["metric"]: r["value"] for r in records})
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    from .trainorch import read_runlog
    records = read_runlog(args.runlog)
    latency = json.loads(Path(args.latency).read_text()) if args.latency else None
    summary = render_report(records, args.out, latency)
    _emit(summary)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "stream": cmd_stream, "probe": cmd_probe,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except StreamGestureError as exc:
        code, kind, msg = exc.exit_code, exc.kind, str(exc)
    except OSError as exc:
        code, kind, msg = 3, "io", str(exc)
    except (ValueError, KeyError) as exc:
        code, kind, msg = 3, "data", str(exc)
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
