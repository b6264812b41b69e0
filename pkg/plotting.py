"""
Plotting
Aggregates evaluation curves over runs (seeds) of one configuration and draws
them as a self-contained SVG line chart with a shaded min/max band.
"""

import logging
import os
from typing import List, Sequence

import numpy as np
import pandas as pd

from runtime import LOG_FILE, read_log

logger = logging.getLogger(__name__)

X_AXES = ("actor_steps", "learner_walltime")
_X_COLUMNS = {"actor_steps": "actor_steps", "learner_walltime": "learner_walltime_s"}

SVG_WIDTH = 640
SVG_HEIGHT = 400
SVG_MARGIN = 50


def resolve_log(path: str) -> str:
    return os.path.join(path, LOG_FILE) if os.path.isdir(path) else path


def load_runs(paths: Sequence[str]) -> List[pd.DataFrame]:
    runs = []
    for path in paths:
        frame = read_log(resolve_log(path))
        frame = frame.dropna(subset=["eval_return"])
        if frame.empty:
            logger.warning(f"{path} has no evaluation records")
            continue
        runs.append(frame)
    return runs


def aggregate_curves(runs: Sequence[pd.DataFrame], x_axis: str = "actor_steps") -> pd.DataFrame:
    """Mean, min and max evaluation return over runs on the union of their x values.

    Each run is linearly interpolated onto the shared grid inside its own x range;
    grid points outside a run's range only aggregate the runs that cover them.
    """
    if x_axis not in X_AXES:
        raise ValueError(f"x axis must be one of {X_AXES}")
    column = _X_COLUMNS[x_axis]
    if not runs:
        return pd.DataFrame(columns=[x_axis, "mean", "min", "max", "runs"])
    sorted_runs = [run.sort_values(column) for run in runs]
    grid = np.unique(np.concatenate([run[column].to_numpy(dtype=np.float64) for run in sorted_runs]))
    values = np.full((len(sorted_runs), len(grid)), np.nan)
    for i, run in enumerate(sorted_runs):
        x = run[column].to_numpy(dtype=np.float64)
        y = run["eval_return"].to_numpy(dtype=np.float64)
        inside = (grid >= x[0]) & (grid <= x[-1])
        values[i, inside] = np.interp(grid[inside], x, y)
    curves = pd.DataFrame({x_axis: grid})
    curves["mean"] = np.nanmean(values, axis=0)
    curves["min"] = np.nanmin(values, axis=0)
    curves["max"] = np.nanmax(values, axis=0)
    curves["runs"] = np.sum(~np.isnan(values), axis=0)
    return curves


def _scale(values: np.ndarray, low: float, high: float, start: float, end: float) -> np.ndarray:
    span = high - low if high > low else 1.0
    return start + (values - low) / span * (end - start)


def render_svg(curves: pd.DataFrame, x_axis: str = "actor_steps", title: str = "evaluation return") -> str:
    width, height, margin = SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{x_axis}</text>']
    if not curves.empty:
        x = curves[x_axis].to_numpy(dtype=np.float64)
        low_y = float(curves["min"].min())
        high_y = float(curves["max"].max())
        px = _scale(x, float(x.min()), float(x.max()), margin, width - margin)

        def py(values):
            return _scale(values, low_y, high_y, height - margin, margin)

        upper = [f"{a:.1f},{b:.1f}" for a, b in zip(px, py(curves["max"].to_numpy()))]
        lower = [f"{a:.1f},{b:.1f}" for a, b in zip(px[::-1], py(curves["min"].to_numpy())[::-1])]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="steelblue" fill-opacity="0.25" '
                     f'stroke="none"/>')
        mean = [f"{a:.1f},{b:.1f}" for a, b in zip(px, py(curves["mean"].to_numpy()))]
        parts.append(f'<polyline points="{" ".join(mean)}" fill="none" stroke="steelblue" stroke-width="2"/>')
        for label, y in ((f"{high_y:.3g}", margin), (f"{low_y:.3g}", height - margin)):
            parts.append(f'<text x="{margin - 5}" y="{y}" text-anchor="end" font-size="10">{label}</text>')
        parts.append(f'<text x="{width - margin}" y="{height - margin + 15}" text-anchor="end" '
                     f'font-size="10">{x.max():.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def plot_runs(paths: Sequence[str], output: str, x_axis: str = "actor_steps") -> pd.DataFrame:
    """Write `<output>.csv` curve data and `<output>.svg`; returns the curve table"""
    curves = aggregate_curves(load_runs(paths), x_axis)
    base, _ = os.path.splitext(output)
    directory = os.path.dirname(os.path.abspath(base))
    os.makedirs(directory, exist_ok=True)
    curves.to_csv(base + ".csv", index=False)
    with open(base + ".svg", "w") as f:
        f.write(render_svg(curves, x_axis))
    logger.info(f"Wrote {len(curves)} curve points over {len(paths)} runs to {base}.csv and {base}.svg")
    return curves
