"""Minimal deterministic SVG line charts (no plotting dependency, stable
bytes for a given input, which keeps rendered artifacts diffable)."""

from __future__ import annotations

from pathlib import Path

from .harness import SweepResult, mean_gauc_by_point

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 40, 55


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def gauc_vs_cache_svg(rows: list[SweepResult], title: str = "GAUC vs cache size") -> str:
    """One polyline per depth L: x = C = L*n*d, y = seed-mean final GAUC."""
    means = mean_gauc_by_point(rows)
    series: dict[int, list[tuple[int, float]]] = {}
    for (L, n, d), g in sorted(means.items()):
        series.setdefault(L, []).append((L * n * d, g))
    for pts in series.values():
        pts.sort()
    xs = [c for pts in series.values() for c, _ in pts]
    ys = [g for pts in series.values() for _, g in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    pad = max(0.005, 0.1 * (y_hi - y_lo))
    y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(c: float) -> float:
        return MARGIN_L + plot_w * (c - x_lo) / (x_hi - x_lo)

    def py(g: float) -> float:
        return MARGIN_T + plot_h * (1.0 - (g - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
        f'y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
        f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" x2="{WIDTH - MARGIN_R}" '
        f'y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
        f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 14}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">cache size C = L*n*d</text>',
        f'<text x="18" y="{HEIGHT / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {HEIGHT / 2:.0f})">final GAUC</text>',
    ]
    # axis ticks
    for i in range(5):
        cx = x_lo + (x_hi - x_lo) * i / 4
        gx = px(cx)
        parts.append(
            f'<line x1="{gx:.1f}" y1="{HEIGHT - MARGIN_B}" x2="{gx:.1f}" '
            f'y2="{HEIGHT - MARGIN_B + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{gx:.1f}" y="{HEIGHT - MARGIN_B + 20}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{int(round(cx))}</text>'
        )
        gy_val = y_lo + (y_hi - y_lo) * i / 4
        gy = py(gy_val)
        parts.append(
            f'<line x1="{MARGIN_L - 5}" y1="{gy:.1f}" x2="{MARGIN_L}" '
            f'y2="{gy:.1f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 9}" y="{gy + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{gy_val:.3f}</text>'
        )
    for idx, (L, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{px(c):.1f},{py(g):.1f}" for c, g in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for c, g in pts:
            parts.append(
                f'<circle cx="{px(c):.1f}" cy="{py(g):.1f}" r="3" fill="{color}"/>'
            )
        ly = MARGIN_T + 16 * idx + 8
        parts.append(
            f'<rect x="{WIDTH - MARGIN_R - 110}" y="{ly - 9}" width="12" height="3" '
            f'fill="{color}"/>'
        )
        parts.append(
            f'<text x="{WIDTH - MARGIN_R - 92}" y="{ly - 3}" font-family="sans-serif" '
            f'font-size="12">L = {L}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_gauc_plot(path: str | Path, rows: list[SweepResult], title: str | None = None) -> None:
    svg = gauc_vs_cache_svg(rows, title or "GAUC vs cache size")
    Path(path).write_text(svg)
