"""Standalone SVG bar charts with the plotted table embedded as metadata.

No plotting dependency: charts are plain strings.  Output is deterministic,
so rerendered reports stay byte-identical.
"""

from __future__ import annotations

_BAR_W = 22
_GAP = 6
_PLOT_H = 260
_MARGIN_L = 56
_MARGIN_T = 30
_LABEL_H = 110


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def bar_chart(values: dict[str, float], title: str, ylabel: str = "",
              comments=None) -> str:
    """Vertical bar chart of label -> value; negative bars hang below zero."""
    labels = list(values)
    vals = [float(values[k]) for k in labels]
    if not vals:
        raise ValueError("nothing to plot")
    vmax = max(max(vals), 0.0)
    vmin = min(min(vals), 0.0)
    span = (vmax - vmin) or 1.0
    scale = _PLOT_H / span
    zero_y = _MARGIN_T + vmax * scale
    width = _MARGIN_L + len(labels) * (_BAR_W + _GAP) + 20
    height = _MARGIN_T + _PLOT_H + _LABEL_H

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<metadata><![CDATA[",
    ]
    for c in comments or []:
        out.append(f"# {c}")
    out.append("label,value")
    out.extend(f"{k},{_fmt(values[k])}" for k in labels)
    out.append("]]></metadata>")
    out.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
               f'font-size="14" font-family="sans-serif">{title}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{_MARGIN_T + _PLOT_H / 2:.1f}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif" '
                   f'transform="rotate(-90 14 {_MARGIN_T + _PLOT_H / 2:.1f})">{ylabel}</text>')
    out.append(f'<line x1="{_MARGIN_L}" y1="{zero_y:.2f}" x2="{width - 10}" '
               f'y2="{zero_y:.2f}" stroke="#444" stroke-width="1"/>')
    for i, (label, v) in enumerate(zip(labels, vals)):
        x = _MARGIN_L + i * (_BAR_W + _GAP)
        h = abs(v) * scale
        y = zero_y - h if v >= 0 else zero_y
        color = "#4878a8" if v >= 0 else "#a84848"
        out.append(f'<rect x="{x}" y="{y:.2f}" width="{_BAR_W}" height="{h:.2f}" '
                   f'fill="{color}"/>')
        ty = _MARGIN_T + _PLOT_H + 12
        out.append(f'<text x="{x + _BAR_W / 2:.1f}" y="{ty}" font-size="10" '
                   f'font-family="sans-serif" text-anchor="end" '
                   f'transform="rotate(-60 {x + _BAR_W / 2:.1f} {ty})">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def grouped_bar_chart(groups: dict[str, dict[str, float]], title: str,
                      comments=None) -> str:
    """Groups of bars (e.g. one group per confidence level)."""
    flat = {}
    for group, values in groups.items():
        for k, v in values.items():
            flat[f"{group}:{k}"] = v
    return bar_chart(flat, title, comments=comments)
