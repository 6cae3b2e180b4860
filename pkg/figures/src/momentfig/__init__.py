"""Figure rendering for momentprop results (CSV in, images out)."""

from .data import MissingColumnError, load_aggregate, load_histograms
from .render import FIGURE_IDS, FigureSpec, build_figure, render

__version__ = "0.1.0"
