"""Fixed plot style so re-rendering identical inputs gives identical images."""

RC_PARAMS = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "legend.framealpha": 0.9,
}

LABEL_COLORS = {
    "mains": "black",
    "oc-mains": "tab:red",
}

REFERENCE_COLOR = "tab:blue"
FIELD_COLORMAP = "viridis"

PNG_METADATA = {"Software": "ocmains-figures"}


def label_color(label: str, index: int = 0) -> str:
    fallback = ["tab:purple", "tab:green", "tab:orange"]
    return LABEL_COLORS.get(label, fallback[index % len(fallback)])
