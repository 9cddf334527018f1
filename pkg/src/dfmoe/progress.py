"""Live progress display for long harness runs.

Shows an animated spinner with the running step; completed steps
accumulate above it.  The harness only calls ``step(label)``, so any object
with that method (or ``None``) can stand in.
"""

from __future__ import annotations

import logging
import time
from typing import Protocol

from rich.console import Console, Group, RenderableType
from rich.live import Live
from rich.spinner import Spinner
from rich.style import Style
from rich.text import Text

from dfmoe.style import AMBER, CREAM, CREAM_DIM, GRAY_MUTED, SUCCESS_COLOR, DfmoeTheme

logger = logging.getLogger(__name__)

# How many completed steps to keep visible
_MAX_COMPLETED = 4


class StepListener(Protocol):
    def step(self, label: str) -> None: ...


def notify(listener: StepListener | None, label: str) -> None:
    """Report a step to ``listener`` if there is one, and to the debug log."""
    logger.debug("step: %s", label)
    if listener is not None:
        listener.step(label)


class ProgressDisplay:
    """Rich Live spinner driven by harness step labels.

    Usage::

        with ProgressDisplay(console, initial_status="Starting...") as progress:
            report = run_equivalence_suite(config, progress=progress)
    """

    def __init__(
        self,
        console: Console,
        *,
        initial_status: str = "Starting...",
        theme: DfmoeTheme | None = None,
    ) -> None:
        self.console = console
        self._theme = theme
        self._step_count = 0
        self._start_time: float | None = None
        self._completed_steps: list[str] = []
        self._current_status: str = initial_status
        self._live: Live | None = None

    # ------------------------------------------------------------------
    # Context manager
    # ------------------------------------------------------------------

    def __enter__(self) -> ProgressDisplay:
        self._start_time = time.time()
        self._step_count = 0
        self._completed_steps = []
        self._live = Live(
            self._build_renderable(),
            console=self.console,
            refresh_per_second=4,
            transient=True,
        )
        self._live.__enter__()
        return self

    def __exit__(self, *args) -> None:
        if self._live is not None:
            try:
                self._live.__exit__(*args)
            except Exception:
                pass
            self._live = None

    # ------------------------------------------------------------------
    # Step interface
    # ------------------------------------------------------------------

    def step(self, label: str) -> None:
        """Start a new step; the previous one moves to the completed list."""
        self._step_count += 1
        if self._current_status and self._current_status != label:
            self._completed_steps.append(self._current_status.rstrip("."))
            if len(self._completed_steps) > _MAX_COMPLETED * 2:
                self._completed_steps = self._completed_steps[-_MAX_COMPLETED:]
        self._current_status = label
        if self._live is not None:
            self._live.update(self._build_renderable())

    @property
    def step_count(self) -> int:
        return self._step_count

    @property
    def completed_steps(self) -> list[str]:
        return list(self._completed_steps)

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def _build_renderable(self) -> RenderableType:
        parts: list[RenderableType] = []

        for step in self._completed_steps[-_MAX_COMPLETED:]:
            line = Text("  ")
            line.append("✓ ", style=Style(color=SUCCESS_COLOR))
            line.append(step, style=Style(color=CREAM_DIM))
            parts.append(line)

        status_text = Text()
        status_text.append(self._current_status, style=Style(color=CREAM, bold=True))
        status_text.append(f"  {self._elapsed()}", style=Style(color=GRAY_MUTED))

        spinner_name = self._theme.spinner_style if self._theme else "dots"
        parts.append(Text("  ", end=""))
        parts.append(Spinner(spinner_name, text=status_text, style=Style(color=AMBER)))
        return Group(*parts)

    def _elapsed(self) -> str:
        """Format elapsed time as M:SS."""
        if self._start_time is None:
            return "0:00"
        secs = int(time.time() - self._start_time)
        return f"{secs // 60}:{secs % 60:02d}"
