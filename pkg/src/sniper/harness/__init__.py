from .compare import ComparisonSpec, RunRecord, run_comparison, run_seed, summarize
from .plot import plot_csvs, render_svg
from .suggest import NoCrossingError, crossing_epoch, halving_schedule, suggest_schedule
