"""Static report: summary CSV and one self-contained SVG per (condition, reward).

Each SVG stacks three panels sharing the step axis: mean reward, CAIS of
MOVE and MOVE probability, the latter two split into attached-limb and
unattached joints.  Lines are trailing moving averages across seeds with
shaded +-1 std bands; dashed markers sit at the phase boundaries.
"""

from __future__ import annotations

import html
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .harness import RunLog, aggregate, read_run_csv, summarize_run, write_summary_csv

DEFAULT_SMOOTHING = 25

WIDTH = 760
PANEL_HEIGHT = 200
MARGIN_LEFT = 70
MARGIN_RIGHT = 170
MARGIN_TOP = 40
PANEL_GAP = 40
FOOTER_LINE = 16

ATTACHED_COLOR = "#d62728"
UNATTACHED_COLOR = "#1f77b4"
ALL_COLOR = "#2ca02c"


@dataclass
class PlotSpec:
    """One SVG figure: a (condition, reward) group rendered to ``path``."""

    condition: str
    reward: str
    path: Path
    smoothing: int = DEFAULT_SMOOTHING

    def __post_init__(self):
        if isinstance(self.smoothing, bool) or not isinstance(self.smoothing, int) or self.smoothing < 1:
            raise ContractError(f"smoothing window must be an integer >= 1, got {self.smoothing!r}")


@dataclass
class ReportResult:
    groups: dict  # (condition, reward) -> list of RunLog
    plots: list[Path]
    summary_path: Path | None
    warnings: list[str] = field(default_factory=list)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` rows (shorter at the start), along axis 0."""
    if window < 1:
        raise ContractError(f"smoothing window must be >= 1, got {window}")
    x = np.asarray(x, dtype=float)
    c = np.cumsum(x, axis=0)
    out = np.empty_like(c)
    n = x.shape[0]
    head = min(window, n)
    counts = np.arange(1, head + 1).reshape((-1,) + (1,) * (x.ndim - 1))
    out[:head] = c[:head] / counts
    if n > window:
        out[window:] = (c[window:] - c[:-window]) / window
    return out


def collect_runs(indir: str | Path) -> tuple[dict, list[str]]:
    """Load every ``<condition>/<reward>/<seed>.csv`` below ``indir``.

    Malformed files are skipped and reported in the returned warnings.
    """
    indir = Path(indir)
    groups: dict = {}
    warnings = []
    for path in sorted(indir.glob("*/*/*.csv")):
        try:
            log = read_run_csv(path)
        except (ContractError, OSError, UnicodeDecodeError) as exc:
            warnings.append(f"skipped {path.relative_to(indir)}: {exc}")
            continue
        key = (path.parent.parent.name, path.parent.name)
        groups.setdefault(key, []).append(log)
    for key, logs in list(groups.items()):
        n = {log.n_steps for log in logs}
        if len(n) > 1:
            keep = max(n, key=lambda k: sum(log.n_steps == k for log in logs))
            dropped = [log for log in logs if log.n_steps != keep]
            groups[key] = [log for log in logs if log.n_steps == keep]
            warnings.append(f"{key[0]}/{key[1]}: dropped {len(dropped)} run(s) with a different length")
    return groups, warnings


def _group_series(logs: list[RunLog]) -> dict[str, np.ndarray]:
    """Per-seed traces, each shaped (n_seeds, n_steps)."""
    out: dict[str, list] = {k: [] for k in ("reward", "cais_att", "cais_un", "p_att", "p_un")}
    for log in logs:
        mask = np.zeros(log.p_move.shape[1], dtype=bool)
        mask[log.attached_joints] = True
        out["reward"].append(log.reward.mean(axis=1))
        out["cais_att"].append(log.cais_move[:, mask].mean(axis=1))
        out["cais_un"].append(log.cais_move[:, ~mask].mean(axis=1) if (~mask).any() else np.zeros(log.n_steps))
        out["p_att"].append(log.p_move[:, mask].mean(axis=1))
        out["p_un"].append(log.p_move[:, ~mask].mean(axis=1) if (~mask).any() else np.zeros(log.n_steps))
    return {k: np.array(v) for k, v in out.items()}


def _band(traces: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    smooth = moving_average(traces.T, window).T
    mean = smooth.mean(axis=0)
    std = smooth.std(axis=0, ddof=1) if smooth.shape[0] > 1 else np.zeros_like(mean)
    return mean, std


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Panel:
    def __init__(self, top: float, n_steps: int, lo: float, hi: float):
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.top, self.n, self.lo, self.hi = top, n_steps, lo - pad, hi + pad
        self.w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def x(self, step):
        return MARGIN_LEFT + (np.asarray(step, dtype=float) - 1) / max(self.n - 1, 1) * self.w

    def y(self, v):
        return self.top + (self.hi - np.asarray(v, dtype=float)) / (self.hi - self.lo) * PANEL_HEIGHT


def render_svg(spec: PlotSpec, logs: list[RunLog], warnings: list[str] = ()) -> str:
    """SVG markup for one (condition, reward) group."""
    if not logs:
        raise ContractError("render_svg needs at least one run")
    series = _group_series(logs)
    n = logs[0].n_steps
    steps = np.arange(1, n + 1)
    proto = logs[0].protocol
    panels = [
        ("Mean reward", [("all joints", ALL_COLOR, "reward")]),
        ("CAIS of MOVE", [("attached limb", ATTACHED_COLOR, "cais_att"), ("unattached", UNATTACHED_COLOR, "cais_un")]),
        ("MOVE probability", [("attached limb", ATTACHED_COLOR, "p_att"), ("unattached", UNATTACHED_COLOR, "p_un")]),
    ]
    height = MARGIN_TOP + len(panels) * (PANEL_HEIGHT + PANEL_GAP) + FOOTER_LINE * (2 + len(warnings))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}"'
        ' font-family="sans-serif" font-size="11">',
        f"<title>{html.escape(spec.condition)} / {html.escape(spec.reward)}</title>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{MARGIN_LEFT}" y="22" font-size="14" font-weight="bold">'
        f"{html.escape(spec.condition)} mobile, reward {html.escape(spec.reward)} "
        f"({len(logs)} seed{'s' if len(logs) != 1 else ''}, moving average {spec.smoothing} steps)</text>",
    ]
    for i, (title, lines) in enumerate(panels):
        top = MARGIN_TOP + i * (PANEL_HEIGHT + PANEL_GAP)
        bands = {key: _band(series[key], spec.smoothing) for _, _, key in lines}
        lo = min(float((m - s).min()) for m, s in bands.values())
        hi = max(float((m + s).max()) for m, s in bands.values())
        p = _Panel(top, n, lo, hi)
        parts.append(f'<g class="panel" data-title="{html.escape(title)}">')
        parts.append(
            f'<rect x="{MARGIN_LEFT}" y="{top}" width="{p.w}" height="{PANEL_HEIGHT}" fill="none" stroke="#444"/>'
        )
        parts.append(f'<text x="{MARGIN_LEFT}" y="{top - 6}" font-weight="bold">{html.escape(title)}</text>')
        for frac in (0.0, 0.5, 1.0):
            v = p.lo + frac * (p.hi - p.lo)
            parts.append(f'<text x="{MARGIN_LEFT - 6}" y="{_fmt(float(p.y(v)) + 4)}" text-anchor="end">{v:.3g}</text>')
        for boundary in (proto.baseline_steps, proto.attach_end):
            if 1 <= boundary <= n:
                bx = _fmt(float(p.x(boundary)))
                parts.append(
                    f'<line class="phase-marker" data-step="{boundary}" x1="{bx}" y1="{top}" x2="{bx}" '
                    f'y2="{top + PANEL_HEIGHT}" stroke="#777" stroke-dasharray="4 3"/>'
                )
        for label, color, key in lines:
            mean, std = bands[key]
            xs = p.x(steps)
            upper = [f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, p.y(mean + std))]
            lower = [f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs[::-1], p.y((mean - std)[::-1]))]
            parts.append(
                f'<path class="band" data-series="{key}" d="M {" L ".join(upper + lower)} Z" '
                f'fill="{color}" fill-opacity="0.2" stroke="none"/>'
            )
            line = [f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, p.y(mean))]
            parts.append(
                f'<path class="line" data-series="{key}" d="M {" L ".join(line)}" fill="none" '
                f'stroke="{color}" stroke-width="1.2"/>'
            )
        for j, (label, color, _) in enumerate(lines):
            ly = top + 14 + 16 * j
            lx = WIDTH - MARGIN_RIGHT + 12
            parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{lx + 24}" y="{ly}">{html.escape(label)}</text>')
        parts.append(
            f'<text x="{MARGIN_LEFT + p.w / 2:.2f}" y="{top + PANEL_HEIGHT + 14}" text-anchor="middle">step</text>'
        )
        parts.append("</g>")
    y = MARGIN_TOP + len(panels) * (PANEL_HEIGHT + PANEL_GAP)
    parts.append(f'<g class="footer"><text x="{MARGIN_LEFT}" y="{y}">Shaded bands: +-1 std across seeds. '
                 f"Dashed lines: tether attached after step {proto.baseline_steps}, removed after step {proto.attach_end}.</text>")
    for k, w in enumerate(warnings):
        parts.append(f'<text class="warning" x="{MARGIN_LEFT}" y="{y + FOOTER_LINE * (k + 1)}" fill="#b00">'
                     f"warning: {html.escape(w)}</text>")
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"


def report(indir: str | Path, smoothing: int = DEFAULT_SMOOTHING) -> ReportResult:
    """Aggregate an output directory into ``summary.csv`` and one SVG per group.

    Raises:
        ContractError: if no readable run is found.
    """
    indir = Path(indir)
    groups, warnings = collect_runs(indir)
    if not groups:
        detail = "; ".join(warnings) if warnings else "no run CSVs found"
        raise ContractError(f"{indir}: nothing to report ({detail})")
    stats = {}
    for key, logs in sorted(groups.items()):
        try:
            stats[key] = aggregate([summarize_run(log) for log in logs])
        except ContractError as exc:
            warnings.append(f"{key[0]}/{key[1]}: no summary metrics ({exc})")
    summary_path = None
    if stats:
        summary_path = indir / "summary.csv"
        write_summary_csv(stats, summary_path)
    plot_dir = indir / "plots"
    plot_dir.mkdir(exist_ok=True)
    plots = []
    for (cond, reward), logs in sorted(groups.items()):
        spec = PlotSpec(cond, reward, plot_dir / f"{cond}_{reward.replace('+', '_')}.svg", smoothing)
        spec.path.write_text(render_svg(spec, logs, warnings))
        plots.append(spec.path)
    return ReportResult(groups, plots, summary_path, warnings)
