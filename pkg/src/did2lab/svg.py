"""Tiny standalone SVG writers: line charts, bar histograms, heat maps."""
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#d62728", "#2ca02c", "#1f77b4", "#9467bd", "#000000", "#ff7f0e", "#8c564b", "#17becf")
W, H = 480, 320
L, R, T, B = 56, 120, 24, 40


def _num(v):
    return f"{v:.2f}"


def _frame(title, xlabel, ylabel, x0, x1, y0, y1):
    pw, ph = W - L - R, H - T - B
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="10">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="14" text-anchor="middle" font-size="12">{escape(title)}</text>',
        f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{L + pw / 2}" y="{H - 6}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{T + ph / 2}" text-anchor="middle" transform="rotate(-90 12 {T + ph / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        fy = k / 4
        yv = y0 + fy * (y1 - y0)
        py = T + ph * (1 - fy)
        out.append(f'<text x="{L - 4}" y="{_num(py + 3)}" text-anchor="end">{yv:.3g}</text>')
        xv = x0 + fy * (x1 - x0)
        px = L + pw * fy
        out.append(f'<text x="{_num(px)}" y="{T + ph + 12}" text-anchor="middle">{xv:.3g}</text>')
    return out


def _mapper(x0, x1, y0, y1):
    pw, ph = W - L - R, H - T - B
    sx = pw / (x1 - x0) if x1 > x0 else 0.0
    sy = ph / (y1 - y0) if y1 > y0 else 0.0
    return lambda x, y: (L + (x - x0) * sx, T + ph - (y - y0) * sy)


def line_chart(path, series, title="", xlabel="", ylabel="", ylim=None):
    """``series``: mapping name -> (xs, ys)."""
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = ylim if ylim else (float(ys.min()), float(ys.max()))
    if y1 <= y0:
        y1 = y0 + 1.0
    if x1 <= x0:
        x1 = x0 + 1.0
    out = _frame(title, xlabel, ylabel, x0, x1, y0, y1)
    m = _mapper(x0, x1, y0, y1)
    for k, (name, (sx, sy)) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_num(px)},{_num(py)}" for px, py in (m(a, b) for a, b in zip(sx, sy)))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = T + 12 + 14 * k
        out.append(f'<line x1="{W - R + 8}" y1="{ly}" x2="{W - R + 24}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 28}" y="{ly + 3}">{escape(str(name))}</text>')
    out.append("</svg>")
    _write(path, out)


def bar_chart(path, edges, counts, title="", xlabel="", ylabel="count"):
    edges = np.asarray(edges, float)
    counts = np.asarray(counts, float)
    y1 = max(float(counts.max()), 1.0)
    out = _frame(title, xlabel, ylabel, float(edges[0]), float(edges[-1]), 0.0, y1)
    m = _mapper(float(edges[0]), float(edges[-1]), 0.0, y1)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        (px0, py), (px1, base) = m(lo, c), m(hi, 0.0)
        out.append(f'<rect x="{_num(px0)}" y="{_num(py)}" width="{_num(max(px1 - px0, 0.5))}" '
                   f'height="{_num(base - py)}" fill="#1f77b4" stroke="white" stroke-width="0.5"/>')
    out.append("</svg>")
    _write(path, out)


def heatmap(path, matrix, row_labels, title="", xlabel="", ylabel=""):
    """Rows top-to-bottom in order; cool (blue) = low, warm (red) = high."""
    a = np.asarray(matrix, float)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo if hi > lo else 1.0
    out = _frame(title, xlabel, ylabel, 0, a.shape[1], 0, a.shape[0])
    pw, ph = W - L - R, H - T - B
    cw, ch = pw / a.shape[1], ph / a.shape[0]
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            t = (a[i, j] - lo) / span
            r, g, b = int(255 * t), int(255 * (1 - abs(2 * t - 1))), int(255 * (1 - t))
            out.append(f'<rect x="{_num(L + j * cw)}" y="{_num(T + i * ch)}" width="{_num(cw + 0.2)}" '
                       f'height="{_num(ch + 0.2)}" fill="rgb({r},{g},{b})"/>')
        out.append(f'<text x="{W - R + 6}" y="{_num(T + (i + 0.5) * ch + 3)}">{escape(str(row_labels[i]))}</text>')
    out.append("</svg>")
    _write(path, out)


def _write(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
