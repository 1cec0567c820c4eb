import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console()


def setup_logging(verbose: bool = False) -> None:
    """Route every `src.*` logger through rich."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(name)s: %(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def ok(msg: str) -> None:
    console.print(f"✅ {msg}", style="bold green")


def warn(msg: str) -> None:
    console.print(f"⚠️  {msg}", style="bold yellow")


def err(msg: str) -> None:
    console.print(f"❌ {msg}", style="bold red")
