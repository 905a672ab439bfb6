"""Dependency-light SVG line plots and CSV export for ROC/PR curves."""

from pathlib import Path

from .metrics import CurveData

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
)
_AXIS_LABELS = {
    "roc": ("false positive rate", "true positive rate"),
    "pr": ("recall", "precision"),
}
_CSV_HEADERS = {"roc": "fpr,tpr", "pr": "recall,precision"}


def write_curve_csv(curve: CurveData, path) -> None:
    lines = [_CSV_HEADERS[curve.kind]]
    lines += [f"{x!r},{y!r}" for x, y in curve.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path) -> CurveData:
    lines = Path(path).read_text().splitlines()
    kinds = {v: k for k, v in _CSV_HEADERS.items()}
    if not lines or lines[0] not in kinds:
        raise ValueError(f"{path}: not a curve CSV")
    kind = kinds[lines[0]]
    points = []
    for line in lines[1:]:
        x, y = line.split(",")
        points.append((float(x), float(y)))
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if kind == "roc":
        area = sum((x1 - x0) * (y0 + y1) / 2.0
                   for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))
    else:
        area = sum((x1 - x0) * y1 for x0, x1, y1 in zip(xs, xs[1:], ys[1:]))
        area += xs[0] * ys[0] if points else 0.0
    return CurveData(tuple(points), kind, float(area))


def _map_x(x, size, margin):
    return margin + x * (size - 2 * margin)


def _map_y(y, size, margin):
    return size - margin - y * (size - 2 * margin)


def svg_curve_plot(curves, kind: str, path, title: str = "",
                   prevalence: float | None = None, size: int = 480,
                   margin: int = 56) -> None:
    """Write an SVG plot of one or more curves with the standard dashed
    baseline (ROC: chance diagonal; PR: horizontal line at prevalence).

    `curves` is a list of (label, CurveData) pairs.
    """
    xlabel, ylabel = _AXIS_LABELS[kind]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    x0, y0 = _map_x(0, size, margin), _map_y(0, size, margin)
    x1, y1 = _map_x(1, size, margin), _map_y(1, size, margin)
    parts.append(
        f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
        'fill="none" stroke="black" stroke-width="1"/>'
    )
    for i in range(6):
        t = i / 5.0
        tx, ty = _map_x(t, size, margin), _map_y(t, size, margin)
        parts.append(
            f'<line x1="{tx}" y1="{y0}" x2="{tx}" y2="{y0 + 4}" stroke="black"/>'
            f'<text x="{tx}" y="{y0 + 18}" font-size="11" '
            f'text-anchor="middle">{t:.1f}</text>'
        )
        parts.append(
            f'<line x1="{x0 - 4}" y1="{ty}" x2="{x0}" y2="{ty}" stroke="black"/>'
            f'<text x="{x0 - 8}" y="{ty + 4}" font-size="11" '
            f'text-anchor="end">{t:.1f}</text>'
        )
    if kind == "roc":
        parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#888" '
            'stroke-dasharray="6,4"/>'
        )
    elif prevalence is not None:
        py = _map_y(prevalence, size, margin)
        parts.append(
            f'<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="#888" '
            'stroke-dasharray="6,4"/>'
        )
    for i, (label, curve) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(
            f"{_map_x(px, size, margin):.2f},{_map_y(py, size, margin):.2f}"
            for px, py in curve.points
        )
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            'stroke-width="1.5"/>'
        )
        ly = margin + 16 + 15 * i
        parts.append(
            f'<line x1="{x1 - 150}" y1="{ly - 4}" x2="{x1 - 130}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{x1 - 124}" y="{ly}" font-size="11">'
            f'{label} ({curve.area:.3f})</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2}" y="{size - 12}" font-size="13" '
        f'text-anchor="middle">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{(y0 + y1) / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2})">{ylabel}</text>'
    )
    if title:
        parts.append(
            f'<text x="{(x0 + x1) / 2}" y="{margin - 22}" font-size="14" '
            f'text-anchor="middle">{title}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
