"""SVG figures for evaluation reports, byte-stable across runs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def write_tradeoff_svg(summary_rows, path) -> str:
    """Trade-off scatter: mean TXT-ALIGN (x) vs mean IMG-ALIGN (y).

    One polyline per strategy, points ordered by guidance scale.  The
    SVG is rendered with a fixed hash salt and no date metadata, so the
    same rows always produce the same bytes.
    """
    strategies = []
    for row in summary_rows:
        if row["strategy"] not in strategies:
            strategies.append(row["strategy"])
    with plt.rc_context({"svg.hashsalt": "jointdiff"}):
        fig, ax = plt.subplots(figsize=(5.5, 4.0))
        for strategy in strategies:
            points = sorted((r for r in summary_rows
                             if r["strategy"] == strategy),
                            key=lambda r: r["scale"])
            ax.plot([p["txt_align_mean"] for p in points],
                    [p["img_align_mean"] for p in points],
                    marker="o", markersize=4, label=strategy)
        ax.set_xlabel("TXT-ALIGN")
        ax.set_ylabel("IMG-ALIGN")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
