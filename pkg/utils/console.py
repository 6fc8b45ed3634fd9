import logging

from rich.console import Console
from rich.logging import RichHandler

from config import Config

console = Console()
error_console = Console(stderr=True)


def setup_logging(level: str = Config.LOG_LEVEL) -> None:
    """Route library logging through rich on stderr"""
    handler = RichHandler(console=error_console, show_path=False, rich_tracebacks=False)
    logging.basicConfig(level=level.upper(), format="%(message)s", datefmt="[%X]", handlers=[handler], force=True)
