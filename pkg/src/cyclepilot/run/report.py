"""Run export: delimited tables, metrics, figures, and a content hash.

Text artifacts are written with stable formatting (sorted JSON keys,
repr floats) so byte-identical runs export byte-identical files.  The
report hash covers exactly the text artifacts; figures are rendered
beside them but excluded because raster encoders are not pinned across
library versions.
"""

from __future__ import annotations

import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cyclepilot.planner.evaluation import capture_flags
from cyclepilot.run.config import canonical_echo

__all__ = ["export_report", "report_hash", "HASHED_ARTIFACTS"]

HASHED_ARTIFACTS = (
    "config_echo.yaml",
    "metrics.json",
    "acquisitions.csv",
    "tracks.csv",
    "anchors.csv",
    "oracle.csv",
    "run_report.json",
)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def report_hash(out_dir) -> str:
    """SHA-256 over the text artifacts, in fixed order, missing files skipped."""
    h = hashlib.sha256()
    for name in HASHED_ARTIFACTS:
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            continue
        h.update(name.encode("ascii") + b"\n")
        with open(path, "rb") as fh:
            h.update(fh.read())
        h.update(b"\n")
    return h.hexdigest()


def export_report(state, out_dir):
    """Write every artifact for a finished (or aborted) run.

    Returns {artifact name: path}.  Also renders overview figures; the
    returned ``report_hash.txt`` contains the content hash of the text
    artifacts only.
    """
    os.makedirs(out_dir, exist_ok=True)
    report = state.build_report()
    paths = {}

    echo_path = os.path.join(out_dir, "config_echo.yaml")
    with open(echo_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_echo(state.cfg))
    paths["config_echo.yaml"] = echo_path

    metrics_path = os.path.join(out_dir, "metrics.json")
    metrics = report.metrics.to_dict() if report.metrics is not None else None
    _write_json(metrics_path, metrics)
    paths["metrics.json"] = metrics_path

    flags = capture_flags(state.acq_rows, state.oracle_rows, state.specs,
                          run_id=state.run_id)
    acq_path = os.path.join(out_dir, "acquisitions.csv")
    acq_rows = []
    for detail, captured in zip(state.acq_detail, flags):
        acq_rows.append(
            (
                detail["time_s"],
                detail["object_id"],
                detail["purpose"],
                detail["true_phase"],
                detail["est_p"],
                detail["est_v"],
                captured,
                detail["dose"],
            )
        )
    _write_csv(
        acq_path,
        ("time_s", "object_id", "purpose", "true_phase", "est_p", "est_v", "captured", "dose"),
        acq_rows,
    )
    paths["acquisitions.csv"] = acq_path

    tracks_path = os.path.join(out_dir, "tracks.csv")
    now = state.world.now_s
    track_rows = []
    for oid in sorted(state.tracks):
        tr = state.tracks[oid]
        stale = tr.stale_s(now)
        track_rows.append(
            (
                oid,
                tr.omega_hat,
                tr.sigma_omega,
                tr.last_t_s,
                tr.last_p,
                tr.last_v,
                None if stale == float("inf") else stale,
                tr.dose,
                tr.last_capture_s,
            )
        )
    _write_csv(
        tracks_path,
        ("object_id", "omega_hat", "sigma_omega", "last_t_s", "est_p", "est_v",
         "stale_s", "dose", "last_capture_s"),
        track_rows,
    )
    paths["tracks.csv"] = tracks_path

    anchors_path = os.path.join(out_dir, "anchors.csv")
    _write_csv(
        anchors_path,
        ("t_s", "query_id", "object_id", "p", "weight"),
        state.anchor_rows,
    )
    paths["anchors.csv"] = anchors_path

    oracle_path = os.path.join(out_dir, "oracle.csv")
    _write_csv(
        oracle_path,
        ("t_s", "object_id", "theta", "omega", "dose"),
        [row[1:] for row in state.oracle_rows],
    )
    paths["oracle.csv"] = oracle_path

    report_path = os.path.join(out_dir, "run_report.json")
    _write_json(report_path, report.to_dict())
    paths["run_report.json"] = report_path

    _render_figures(state, out_dir, paths)

    digest = report_hash(out_dir)
    hash_path = os.path.join(out_dir, "report_hash.txt")
    with open(hash_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(digest + "\n")
    paths["report_hash.txt"] = hash_path
    return paths


def _render_figures(state, out_dir, paths):
    field_path = os.path.join(out_dir, "field.png")
    fig, ax = plt.subplots(figsize=(6, 6))
    xs, ys, cs = [], [], []
    for oid in sorted(state.tracks):
        tr = state.tracks[oid]
        xs.append(tr.pos_um[0])
        ys.append(tr.pos_um[1])
        cs.append(tr.last_p if tr.last_p is not None else np.nan)
    sc = ax.scatter(xs, ys, c=cs, cmap="twilight", vmin=0.0, vmax=1.0, s=28)
    fig.colorbar(sc, ax=ax, label="estimated pseudo-time")
    ax.set_xlabel("x (um)")
    ax.set_ylabel("y (um)")
    ax.set_title("stage map")
    fig.tight_layout()
    fig.savefig(field_path, dpi=110)
    plt.close(fig)
    paths["field.png"] = field_path

    timeline_path = os.path.join(out_dir, "timeline.png")
    fig, ax = plt.subplots(figsize=(9, 4))
    colors = {"capture": "tab:red", "verify": "tab:blue", "al_query": "tab:green"}
    for purpose, color in colors.items():
        ts = [d["time_s"] for d in state.acq_detail if d["purpose"] == purpose]
        ids = [d["object_id"] for d in state.acq_detail if d["purpose"] == purpose]
        ax.scatter(ts, ids, s=6, c=color, label=purpose)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("object id")
    ax.set_title("acquisition timeline")
    if state.acq_detail:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(timeline_path, dpi=110)
    plt.close(fig)
    paths["timeline.png"] = timeline_path

    phase_path = os.path.join(out_dir, "phase.png")
    fig, ax = plt.subplots(figsize=(5, 5))
    tp = [d["true_phase"] for d in state.acq_detail if d["est_p"] is not None]
    ep = [d["est_p"] for d in state.acq_detail if d["est_p"] is not None]
    ax.scatter(tp, ep, s=5, alpha=0.5)
    ax.set_xlabel("hidden phase (cycles)")
    ax.set_ylabel("estimated pseudo-time (cycles)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title("estimate vs hidden phase")
    fig.tight_layout()
    fig.savefig(phase_path, dpi=110)
    plt.close(fig)
    paths["phase.png"] = phase_path

    resid_path = os.path.join(out_dir, "residuals.png")
    fig, ax = plt.subplots(figsize=(5, 4))
    resid = [
        min(abs(d["est_p"] - d["true_phase"]), 1 - abs(d["est_p"] - d["true_phase"]))
        for d in state.acq_detail
        if d["est_p"] is not None
    ]
    if resid:
        ax.hist(resid, bins=40, color="tab:purple")
    ax.set_xlabel("circular error (cycles)")
    ax.set_ylabel("count")
    ax.set_title("estimate error distribution")
    fig.tight_layout()
    fig.savefig(resid_path, dpi=110)
    plt.close(fig)
    paths["residuals.png"] = resid_path
