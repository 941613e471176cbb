"""Rich output for the command line, and the log handler that shares it.

Pipeline code logs; only the CLI writes to a :class:`Console`.
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Sequence
from enum import Enum
from typing import IO, Any, NamedTuple

from rich.console import Console as RichConsole
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

LOGGER_NAME = "tubeot"


class Mark(NamedTuple):
    glyph: str
    fallback: str
    style: str


class Tone(Enum):
    """Status line kinds, each with a unicode mark and a plain-ASCII stand-in."""

    INFO = Mark("◆", "-", "cyan")
    SUCCESS = Mark("✔", "+", "green")
    WARNING = Mark("▲", "!", "yellow")
    ERROR = Mark("✗", "x", "red")


def supports_glyphs(stream: IO[str], *, legacy_windows: bool = False) -> bool:
    """True when every unicode mark survives the stream's encoding.

    Legacy Windows consoles render through a code page and always get ASCII.
    """
    if legacy_windows:
        return False
    encoding = getattr(stream, "encoding", None)
    if not encoding:
        return True
    glyphs = "".join(tone.value.glyph for tone in Tone)
    try:
        glyphs.encode(encoding)
    except (UnicodeEncodeError, LookupError):
        return False
    return True


def _format_cell(value: Any) -> str:
    return f"{value:.4g}" if isinstance(value, float) else str(value)


class Console:
    """Status lines, rules and tables on stdout (or stderr)."""

    def __init__(self, *, quiet: bool = False, stderr: bool = False) -> None:
        self.quiet = quiet
        self._console = RichConsole(stderr=stderr)
        stream = self._console.file
        self.unicode = supports_glyphs(stream, legacy_windows=self._console.legacy_windows)
        if not self.unicode:
            # Free text may still hold symbols the code page lacks; print "?" for them.
            reconfigure = getattr(stream, "reconfigure", None)
            if reconfigure is not None:
                with contextlib.suppress(OSError, ValueError):
                    reconfigure(errors="replace")

    @property
    def rich(self) -> RichConsole:
        return self._console

    def mark(self, tone: Tone) -> str:
        mark = tone.value
        return mark.glyph if self.unicode else mark.fallback

    def print(self, *args: Any, **kwargs: Any) -> None:
        if self.quiet:
            return
        self._console.print(*args, **kwargs)

    def status(self, tone: Tone, message: str) -> None:
        self.print(f"[{tone.value.style}]{self.mark(tone)}[/] {escape(message)}")

    def info(self, message: str) -> None:
        self.status(Tone.INFO, message)

    def success(self, message: str) -> None:
        self.status(Tone.SUCCESS, message)

    def warning(self, message: str) -> None:
        self.status(Tone.WARNING, message)

    def error(self, message: str) -> None:
        self.status(Tone.ERROR, message)

    def rule(self, title: str = "") -> None:
        if self.quiet:
            return
        self._console.rule(f"[bold]{escape(title)}[/]" if title else "")

    def table(self, headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
        """Borderless table; floats shown to four significant digits."""
        if self.quiet:
            return
        grid = Table(*headers, box=None, header_style="bold cyan", pad_edge=False)
        for row in rows:
            # Metric values like "[0.9, 0.95]" would otherwise parse as markup.
            grid.add_row(*(escape(_format_cell(value)) for value in row))
        self._console.print(grid)


class QuietConsole(Console):
    def __init__(self) -> None:
        super().__init__(quiet=True)


def configure_logging(level: str, console: Console | None = None) -> logging.Logger:
    """Route the package logger to a single rich handler at ``level``.

    Calling it again swaps the handler rather than stacking a second one.
    An unrecognised level name falls back to WARNING.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.handlers = [h for h in logger.handlers if not isinstance(h, RichHandler)]
    target = console.rich if console is not None else RichConsole(stderr=True)
    logger.addHandler(RichHandler(console=target, show_path=False, markup=False))
    logger.propagate = False
    name = level.strip().upper()
    resolved = logging.getLevelName(name)
    if isinstance(resolved, int):
        logger.setLevel(resolved)
    else:
        logger.setLevel(logging.WARNING)
        logger.warning("unknown log level %r, using WARNING", level)
    return logger
