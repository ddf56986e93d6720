"""Minimal dependency-free log-log SVG plots for comparison panels."""
import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H, PAD = 640, 420, 56


def _path(lx, ly, xr, yr):
    sx = lambda v: PAD + (v - xr[0]) / (xr[1] - xr[0]) * (W - 2 * PAD)
    sy = lambda v: H - PAD - (v - yr[0]) / (yr[1] - yr[0]) * (H - 2 * PAD)
    pts = [f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(lx, ly)]
    return "M" + " L".join(pts)


def loglog_svg(series, title, delta=None):
    """Render ``{label: (k, values)}`` on log-log axes; nonpositive points are dropped.

    Dashed guides with slopes ``-delta/2`` and ``-delta`` are added when
    ``delta`` is given.
    """
    clean = {}
    for lab, (k, v) in series.items():
        k, v = np.asarray(k, float), np.asarray(v, float)
        m = (k > 0) & np.isfinite(v) & (v > 0)
        if m.sum() >= 2:
            clean[lab] = (np.log10(k[m]), np.log10(v[m]))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif">{title}</text>']
    if not clean:
        out.append("</svg>")
        return "\n".join(out) + "\n"
    xs = np.concatenate([a for a, _ in clean.values()])
    ys = np.concatenate([b for _, b in clean.values()])
    xr = (xs.min(), max(xs.max(), xs.min() + 1e-9))
    yr = (ys.min(), max(ys.max(), ys.min() + 1e-9))
    out.append(f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" '
               'fill="none" stroke="black"/>')
    for i, (lab, (lx, ly)) in enumerate(clean.items()):
        c = COLORS[i % len(COLORS)]
        out.append(f'<path d="{_path(lx, ly, xr, yr)}" fill="none" stroke="{c}"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * i}" font-size="10" '
                   f'fill="{c}" font-family="sans-serif">{lab}</text>')
    if delta is not None:
        y0 = yr[1]
        for p in (delta / 2, delta):
            lx = np.array(xr)
            ly = y0 - p * (lx - xr[0])
            out.append(f'<path d="{_path(lx, ly, xr, yr)}" fill="none" stroke="gray" '
                       'stroke-dasharray="4 3"/>')
    out.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="11" '
               f'font-family="sans-serif">log10 k [{xr[0]:.1f}, {xr[1]:.1f}]  '
               f'log10 value [{yr[0]:.1f}, {yr[1]:.1f}]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
