"""Trace files (one CSV per agent, merged events CSV, manifest) and the
plot-ready tables derived from them."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import TraceError

FORMAT_VERSION = 1
VERBOSITY_ENV = "STDMPC_TRACE_VERBOSITY"
EVENT_COLUMNS = ["k", "agent", "kind", "seq", "payload"]
QUIET_KINDS = {"sample", "apply"}


def trace_verbosity(default=1):
    raw = os.environ.get(VERBOSITY_ENV)
    if raw is None or raw == "":
        return default
    try:
        v = int(raw)
    except ValueError:
        raise TraceError(f"{VERBOSITY_ENV} must be an integer 0, 1 or 2, got {raw!r}") from None
    return min(max(v, 0), 2)


def agent_columns(n, m):
    return (["k", "mode", "triggered", "solved", "m"] + [f"e_{i}" for i in range(n)]
            + [f"u_{j}" for j in range(m)] + ["s", "ref_s"] + [f"ur_{j}" for j in range(m)]
            + ["x_ref", "y_ref", "heading_ref"])


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return "|".join(_fmt(x) for x in v)
    return str(v)


def _payload(d):
    return ";".join(f"{k}={_fmt(d[k])}" for k in sorted(d))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_trace(report, out_dir, verbosity=None):
    """Write ``agent_<id>.csv``, ``events.csv`` and ``manifest.json``; returns the paths."""
    from .dynamics import reference_pose

    verbosity = trace_verbosity() if verbosity is None else verbosity
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = report.config
    files = {}
    columns = {}
    for aid in sorted(report.history):
        h = report.history[aid]
        n = h["e"].shape[1]
        m = h["u"].shape[1]
        cols = agent_columns(n, m)
        rows = []
        steps = len(h["u"])
        for k in range(steps + 1):
            last = k == steps
            pose = reference_pose(h["path"], float(h["ref_s"][k]))
            row = [k, "" if last else h["mode"][k], "" if last else int(h["triggered"][k]),
                   "" if last else int(h["solved"][k]), "" if last else h["m"][k]]
            row += [_fmt(x) for x in h["e"][k]]
            row += [""] * m if last else [_fmt(x) for x in h["u"][k]]
            row += [_fmt(h["s"][k]), _fmt(h["ref_s"][k])]
            row += [""] * m if last else [_fmt(x) for x in h["u_ref"][k]]
            row += [_fmt(x) for x in pose]
            rows.append(row)
        name = f"agent_{aid}.csv"
        _write_csv(out / name, cols, rows)
        files[str(aid)] = name
        columns[name] = cols
    recs = [r for r in report.trace.sorted() if verbosity >= 1 or r.kind not in QUIET_KINDS]
    _write_csv(out / "events.csv", EVENT_COLUMNS,
               [[r.k, r.agent, r.kind, r.seq, _payload(r.payload)] for r in recs])
    columns["events.csv"] = EVENT_COLUMNS
    manifest = {
        "format_version": FORMAT_VERSION, "name": cfg.name, "T": cfg.T, "N": cfg.N, "steps": cfg.steps,
        "seed": cfg.seed, "agents": sorted(int(a) for a in report.history),
        "agent_files": files, "events_file": "events.csv", "columns": columns,
        "counters": {str(k): v for k, v in sorted(report.agents.items())},
        "tallies": {k: report.tallies[k] for k in sorted(report.tallies)},
        "verbosity": verbosity,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [out / f for f in list(files.values()) + ["events.csv", "manifest.json"]]


# --- plot data -------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise TraceError(f"{path}: empty file (missing header)") from None
        return header, [row for row in r]


def _num(x):
    return float(x) if x != "" else math.nan


def load_trace(trace_dir):
    """Per-agent column dictionaries keyed by agent id."""
    d = Path(trace_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise TraceError(f"{d}: no manifest.json; not a trace directory")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise TraceError(f"{mpath}: unsupported format version {manifest.get('format_version')!r}")
    agents = {}
    for aid in manifest["agents"]:
        path = d / manifest["agent_files"][str(aid)]
        header, rows = _read_csv(path)
        missing = [c for c in ("k", "mode", "triggered", "solved", "s", "x_ref", "y_ref", "heading_ref")
                   if c not in header]
        if missing:
            raise TraceError(f"{path}: missing columns {', '.join(missing)}")
        cols = {c: [row[i] for row in rows] for i, c in enumerate(header)}
        agents[aid] = cols
    return manifest, agents


def plot_schema(agent_ids, n, m):
    pairs = list(itertools.combinations(agent_ids, 2))
    return {
        "fig2_states.csv": ["k"] + [f"a{a}_e_{i}" for a in agent_ids for i in range(n)],
        "fig3_controls.csv": ["k"] + [f"a{a}_u_{j}" for a in agent_ids for j in range(m)],
        "fig4_sync.csv": ["k"] + [f"abs_s{i}_minus_s{j}" for i, j in pairs],
        "fig5_triggers.csv": ["k", "agent", "event"],
        "fig6_paths.csv": ["k", "agent", "x_ref", "y_ref", "x", "y"],
    }


def plotdata(trace_dir, out_dir=None):
    """Write the five figure tables next to the trace (or into ``out_dir``)."""
    manifest, agents = load_trace(trace_dir)
    out = Path(out_dir) if out_dir is not None else Path(trace_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = list(agents)
    n = len([c for c in (agents[ids[0]] if ids else {}) if c.startswith("e_")])
    m = len([c for c in (agents[ids[0]] if ids else {}) if c.startswith("u_")])
    schema = plot_schema(ids, n, m)
    nrows = min((len(agents[a]["k"]) for a in ids), default=0)

    states, controls, sync, trig, paths = [], [], [], [], []
    for r in range(nrows):
        k = int(agents[ids[0]]["k"][r])
        states.append([k] + [agents[a][f"e_{i}"][r] for a in ids for i in range(n)])
        if agents[ids[0]]["u_0" if m else "k"][r] != "":
            controls.append([k] + [agents[a][f"u_{j}"][r] for a in ids for j in range(m)])
        s = {a: _num(agents[a]["s"][r]) for a in ids}
        sync.append([k] + [repr(abs(s[i] - s[j])) for i, j in itertools.combinations(ids, 2)])
        for a in ids:
            if agents[a]["triggered"][r] == "1":
                trig.append([k, a, "solve" if agents[a]["solved"][r] == "1" else "terminal"])
        for a in ids:
            c = agents[a]
            xr, yr, hr = _num(c["x_ref"][r]), _num(c["y_ref"][r]), _num(c["heading_ref"][r])
            if n >= 3:
                xe, ye, the = (_num(c[f"e_{i}"][r]) for i in range(3))
                th = hr - the
                x = xr - (math.cos(th) * xe - math.sin(th) * ye)
                y = yr - (math.sin(th) * xe + math.cos(th) * ye)
            else:
                x, y = xr, yr
            paths.append([k, a, repr(xr), repr(yr), repr(x), repr(y)])
    tables = {"fig2_states.csv": states, "fig3_controls.csv": controls, "fig4_sync.csv": sync,
              "fig5_triggers.csv": trig, "fig6_paths.csv": paths}
    written = []
    for name, rows in tables.items():
        _write_csv(out / name, schema[name], rows)
        written.append(out / name)
    return written
