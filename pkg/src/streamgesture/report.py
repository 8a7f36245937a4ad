"""Static training/latency report: PNG line charts and a markdown summary table."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
PNG_META = {"Software": "streamgesture"}


def _save(fig, path: Path) -> str:
    fig.savefig(path, format="png", dpi=80, metadata=PNG_META)
    plt.close(fig)
    return path.name


def _series(records, stage, key, region=None):
    pts = [(r["step"], r[key]) for r in records
           if r.get("stage") == stage and key in r and (region is None or r.get("region") == region)]
    return [p[0] for p in pts], [p[1] for p in pts]


def render_report(records: list[dict], out_dir, latency: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    lines = ["# Training report", ""]
    if not records and latency is None:
        lines.append("Empty runlog: nothing to report.")
        (out / "summary.md").write_text("\n".join(lines) + "\n")
        return {"empty": True, "images": [], "summary": "summary.md"}

    regions = sorted({r["region"] for r in records if r.get("region")})
    for stage in ("svq1", "svq2"):
        if any(r.get("stage") == stage for r in records):
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for reg in regions:
                x, y = _series(records, stage, "loss", reg)
                if x:
                    ax.plot(x, y, label=reg)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_title(stage)
            ax.legend(fontsize=7)
            images.append(_save(fig, out / f"loss_{stage}.png"))
    for stage in ("expert", "fuse"):
        x, y = _series(records, stage, "loss")
        if x:
            fig, ax = plt.subplots(figsize=(6, 3.5))
            ax.plot(x, y, label="train")
            for key in sorted({k for r in records if r.get("stage") == stage for k in r if k.startswith("heldout")}):
                hx, hy = _series(records, stage, key)
                ax.plot(hx, hy, "--", label=key)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_title(stage)
            ax.legend(fontsize=7)
            images.append(_save(fig, out / f"loss_{stage}.png"))
    x, y = _series(records, "fuse", "lambda_ugr")
    if x:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(x, y, marker=".")
        ax.set_xlabel("step")
        ax.set_ylabel("masking ratio cap")
        ax.set_title("UGM schedule")
        images.append(_save(fig, out / "schedule.png"))
    if latency is not None:
        vals = latency.get("per_chunk_compute_ms", {}).get("values", [])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(range(1, len(vals) + 1), vals)
        ax.axhline(latency.get("chunk_ms", 200.0) / 4, color="k", ls=":", lw=0.8)
        ax.set_xlabel("chunk")
        ax.set_ylabel("compute (ms)")
        ax.set_title("per-chunk compute")
        images.append(_save(fig, out / "latency.png"))

    lines += ["| stage | records | last step | last loss |", "|---|---|---|---|"]
    for stage in ("svq1", "svq2", "expert", "fuse"):
        recs = [r for r in records if r.get("stage") == stage]
        if recs:
            last = recs[-1]
            loss = last.get("loss")
            lines.append(f"| {stage} | {len(recs)} | {last.get('step')} | "
                         f"{'' if loss is None else f'{loss:.4f}'} |")
    evals = [r for r in records if str(r.get("stage", "")).endswith("_eval")]
    if evals:
        lines += ["", "## Held-out", ""]
        for r in evals:
            body = {k: v for k, v in r.items() if k not in ("stage", "step", "wall_time")}
            lines.append(f"- {r['stage']}: `{json.dumps(body, sort_keys=True)}`")
    if latency is not None:
        pc = latency.get("per_chunk_compute_ms", {})
        lines += ["", "## Latency", "",
                  f"- first token: {latency.get('first_token_latency_ms', 0):.2f} ms compute "
                  f"+ {latency.get('accumulation_ms', latency.get('chunk_ms', 0)):.0f} ms accumulation",
                  f"- per chunk: mean {pc.get('mean', 0):.2f} ms, p95 {pc.get('p95', 0):.2f} ms",
                  f"- real time factor: {latency.get('real_time_factor', 0):.3f}"]
    lines += ["", *[f"![{name}]({name})" for name in images]]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    return {"empty": False, "images": images, "summary": "summary.md"}
