"""Tiny SVG line-plot writer for risk curves.

Deliberately minimal: linear axes, a handful of ticks, one polyline per
series with vertical error bars, and a text legend.  It exists so the
command-line tool can emit a picture without a plotting dependency; anything
fancier should be done downstream from the CSV.
"""

import math

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 72
MARGIN_RIGHT = 24
MARGIN_TOP = 40
MARGIN_BOTTOM = 52
PALETTE = ("#1f6fb2", "#d1495b", "#3a7d44", "#8a4f9e")
N_TICKS = 5


def _finite_points(xs, ys):
    return [(float(x), float(y)) for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y)]


def _axis_range(values):
    lo, hi = min(values), max(values)
    if lo == hi:
        pad = 0.5 * max(1e-12, abs(lo))
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Scale:
    def __init__(self, lo, hi, out_lo, out_hi):
        self.lo, self.hi = lo, hi
        self.out_lo, self.out_hi = out_lo, out_hi

    def __call__(self, v):
        frac = (v - self.lo) / (self.hi - self.lo)
        return self.out_lo + frac * (self.out_hi - self.out_lo)


def _ticks(lo, hi):
    return [lo + i * (hi - lo) / (N_TICKS - 1) for i in range(N_TICKS)]


def render_line_plot(series, xlabel="", ylabel="", title=""):
    """SVG text for ``series`` = [(label, xs, ys, yerrs-or-None), ...].

    Points with non-finite coordinates are dropped; a series with no finite
    point is legended but not drawn.  Output is a pure function of the
    inputs, so identical data gives identical bytes.
    """
    cleaned = []
    all_x, all_y = [], []
    for label, xs, ys, yerrs in series:
        pts = _finite_points(xs, ys)
        errs = None
        if yerrs is not None:
            errs = [float(e) for x, y, e in zip(xs, ys, yerrs)
                    if math.isfinite(x) and math.isfinite(y)]
        cleaned.append((label, pts, errs))
        all_x.extend(x for x, _ in pts)
        all_y.extend(y for _, y in pts)
        if errs:
            all_y.extend(y + e for (_, y), e in zip(pts, errs)
                         if math.isfinite(e))
            all_y.extend(y - e for (_, y), e in zip(pts, errs)
                         if math.isfinite(e))
    if not all_x:
        all_x = [0.0, 1.0]
        all_y = [0.0, 1.0]
    x_lo, x_hi = _axis_range(all_x)
    y_lo, y_hi = _axis_range(all_y)
    sx = _Scale(x_lo, x_hi, MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    sy = _Scale(y_lo, y_hi, HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        '<g font-family="monospace" font-size="12" fill="#222">',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="20" '
                   f'text-anchor="middle">{_esc(title)}</text>')

    ax_y = HEIGHT - MARGIN_BOTTOM
    out.append(f'<line x1="{MARGIN_LEFT}" y1="{ax_y}" '
               f'x2="{WIDTH - MARGIN_RIGHT}" y2="{ax_y}" stroke="#222"/>')
    out.append(f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" '
               f'x2="{MARGIN_LEFT}" y2="{ax_y}" stroke="#222"/>')
    for t in _ticks(x_lo, x_hi):
        px = sx(t)
        out.append(f'<line x1="{px:.2f}" y1="{ax_y}" x2="{px:.2f}" '
                   f'y2="{ax_y + 5}" stroke="#222"/>')
        out.append(f'<text x="{px:.2f}" y="{ax_y + 18}" '
                   f'text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y_lo, y_hi):
        py = sy(t)
        out.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{py:.2f}" '
                   f'x2="{MARGIN_LEFT}" y2="{py:.2f}" stroke="#222"/>')
        out.append(f'<text x="{MARGIN_LEFT - 8}" y="{py + 4:.2f}" '
                   f'text-anchor="end">{t:.4g}</text>')
    if xlabel:
        out.append(f'<text x="{(MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2:.1f}" '
                   f'y="{HEIGHT - 12}" text-anchor="middle">'
                   f'{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{(MARGIN_TOP + ax_y) / 2:.1f}" '
                   f'text-anchor="middle" transform="rotate(-90 16 '
                   f'{(MARGIN_TOP + ax_y) / 2:.1f})">{_esc(ylabel)}</text>')

    for idx, (label, pts, errs) in enumerate(cleaned):
        color = PALETTE[idx % len(PALETTE)]
        if errs:
            for (x, y), e in zip(pts, errs):
                if not math.isfinite(e) or e <= 0:
                    continue
                px, y_top, y_bot = sx(x), sy(y + e), sy(y - e)
                out.append(f'<line x1="{px:.2f}" y1="{y_top:.2f}" '
                           f'x2="{px:.2f}" y2="{y_bot:.2f}" '
                           f'stroke="{color}"/>')
                for py in (y_top, y_bot):
                    out.append(f'<line x1="{px - 3:.2f}" y1="{py:.2f}" '
                               f'x2="{px + 3:.2f}" y2="{py:.2f}" '
                               f'stroke="{color}"/>')
        if pts:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5"/>')
            for x, y in pts:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" '
                           f'r="2.5" fill="{color}"/>')
        ly = MARGIN_TOP + 14 * idx
        lx = WIDTH - MARGIN_RIGHT - 150
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{_esc(label)}</text>')

    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def write_line_plot(path, series, xlabel="", ylabel="", title=""):
    """Render and write with LF endings regardless of platform."""
    payload = render_line_plot(series, xlabel=xlabel, ylabel=ylabel,
                               title=title)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)


__all__ = ["render_line_plot", "write_line_plot"]
