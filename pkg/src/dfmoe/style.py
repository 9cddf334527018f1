"""UI tokens, themes and rendering helpers for the dfmoe CLI.

Colors, labels and table layouts live here; cli.py and progress.py never
hard-code a style string.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

from rich.style import Style
from rich.table import Table
from rich.text import Text
from rich.theme import Theme

from dfmoe.report import Check, MetricTable, RunReport


# -------------------------------------------------------------------
# Color palette (warm amber)
# -------------------------------------------------------------------

AMBER         = "#D4894A"
CREAM         = "#F5E6D0"   # primary body text
CREAM_DIM     = "#C9B89E"   # secondary text
GRAY_MUTED    = "#7A7A7A"   # metadata
GRAY_DARK     = "#555555"

SUCCESS_COLOR  = "#6BBF6B"
ERROR_COLOR    = "#D45B5B"
WARNING_COLOR  = "#D4A94A"


# -------------------------------------------------------------------
# Themes
# -------------------------------------------------------------------

@dataclass
class DfmoeTheme:
    """Rich styles plus behavioural flags."""

    name: str
    accent: str
    text: str
    text_dim: str
    text_faint: str
    success: str
    error: str
    warning: str
    spinner_style: str = "dots"

    def to_rich_theme(self) -> Theme:
        """Convert to a ``rich.theme.Theme`` for ``Console(theme=...)``."""
        return Theme({
            "accent":  self.accent,
            "body":    self.text,
            "dim":     self.text_dim,
            "faint":   self.text_faint,
            "success": self.success,
            "error":   self.error,
            "warning": self.warning,
        })


THEME_WARM = DfmoeTheme(
    name="warm",
    accent=f"bold {AMBER}",
    text=CREAM,
    text_dim=CREAM_DIM,
    text_faint=GRAY_MUTED,
    success=SUCCESS_COLOR,
    error=ERROR_COLOR,
    warning=WARNING_COLOR,
)

THEME_MINIMAL = DfmoeTheme(
    name="minimal",
    accent="bold",
    text="white",
    text_dim="dim",
    text_faint="dim",
    success="green",
    error="red",
    warning="yellow",
    spinner_style="line",
)

THEMES: dict[str, DfmoeTheme] = {
    "warm": THEME_WARM,
    "minimal": THEME_MINIMAL,
}

DEFAULT_THEME = "warm"


def get_theme(name: str | None) -> DfmoeTheme:
    """Look up a theme by name; unknown or empty names give the default."""
    return THEMES.get((name or "").strip().lower(), THEMES[DEFAULT_THEME])


# -------------------------------------------------------------------
# Microcopy
# -------------------------------------------------------------------

PROGRESS_LABELS: dict[str, str] = {
    "synth": "Synthesizing corpus...",
    "ar": "Verifying AR generation (P={p}, target {n})...",
    "decentral": "Checking decentralized identity...",
    "convex": "Checking equal-prior combination...",
    "experts": "Checking exact expert ensemble...",
    "train": "Training {k} experts...",
    "ablation": "Ablation: {what}...",
}


# -------------------------------------------------------------------
# Number formatting
# -------------------------------------------------------------------

def format_number(value: Any) -> str:
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return str(value)
        if value != 0.0 and (abs(value) < 1e-3 or abs(value) >= 1e6):
            return f"{value:.3e}"
        return f"{value:.6f}"
    return str(value)


# -------------------------------------------------------------------
# Check badges and tables
# -------------------------------------------------------------------

def format_check_badge(check: Check, theme: DfmoeTheme) -> Text:
    """``PASS`` / ``FAIL`` (hard) or ``ok`` / ``warn`` (soft)."""
    if check.hard:
        label, color = ("PASS", theme.success) if check.passed else ("FAIL", theme.error)
    else:
        label, color = ("ok", theme.success) if check.passed else ("warn", theme.warning)
    return Text(label, style=Style.parse(color) + Style(bold=True))


def build_checks_table(report: RunReport, theme: DfmoeTheme) -> Table:
    table = Table(title=f"{report.kind} checks (seed {report.seed})", title_style=theme.accent)
    table.add_column("", no_wrap=True)
    table.add_column("check", style=theme.text)
    table.add_column("value", justify="right")
    table.add_column("threshold", justify="right", style=theme.text_faint)
    table.add_column("detail", style=theme.text_faint)
    for check in report.checks:
        op = "≤" if check.comparator == "le" else ">"
        table.add_row(
            format_check_badge(check, theme),
            check.name,
            format_number(check.value),
            f"{op} {format_number(check.threshold)}",
            check.detail,
        )
    return table


def build_metric_table(metrics: MetricTable, theme: DfmoeTheme, max_rows: int = 40) -> Table:
    table = Table(title=metrics.name, title_style=theme.accent)
    for column in metrics.columns:
        table.add_column(column, style=theme.text)
    for row in metrics.rows[:max_rows]:
        table.add_row(*(format_number(v) for v in row))
    if len(metrics.rows) > max_rows:
        table.caption = f"{len(metrics.rows) - max_rows} more rows in {metrics.name}.csv"
    return table


def build_distribution_table(probs: Sequence[float], theme: DfmoeTheme, mask_id: int | None = None) -> Table:
    """Next-token distribution, one row per token."""
    table = Table(title="next-token distribution", title_style=theme.accent)
    table.add_column("token", justify="right")
    table.add_column("p", justify="right", style=theme.text)
    for token, p in enumerate(probs):
        label = f"{token} (mask)" if token == mask_id else str(token)
        table.add_row(label, format_number(float(p)))
    return table


def format_summary_line(report: RunReport, theme: DfmoeTheme) -> Text:
    failing = report.failing()
    text = Text("  ")
    if not failing:
        text.append("✓ ", style=Style.parse(theme.success))
        text.append(f"all {sum(c.hard for c in report.checks)} hard checks passed", style=Style.parse(theme.text))
    else:
        text.append("✗ ", style=Style.parse(theme.error))
        text.append(f"{len(failing)} failing: " + ", ".join(c.name for c in failing), style=Style.parse(theme.text))
    return text


def format_save_confirmation(path: str) -> Text:
    """Render the save confirmation line."""
    text = Text("  ")
    text.append("✓", style=Style(color=SUCCESS_COLOR))
    text.append(f" Saved: {path}", style=Style(color=GRAY_MUTED))
    return text
