"""Rich console utilities for terminal output."""

from rich.console import Console
from rich.table import Table
from rich.theme import Theme

KDSLU_THEME = Theme({
    "info": "cyan",
    "success": "green",
    "warning": "yellow",
    "error": "red bold",
    "heading": "bold magenta",
    "muted": "dim",
    "stage": "bold blue",
    "metric": "bold cyan",
})

# Global console instance
console = Console(theme=KDSLU_THEME)


def print_info(message: str) -> None:
    """Print an informational message."""
    console.print(f"[info]{message}[/info]")


def print_success(message: str) -> None:
    """Print a success message."""
    console.print(f"[success]{message}[/success]")


def print_warning(message: str) -> None:
    """Print a warning message."""
    console.print(f"[warning]Warning: {message}[/warning]")


def print_error(message: str) -> None:
    """Print an error message."""
    console.print(f"[error]Error: {message}[/error]")


def print_heading(title: str) -> None:
    """Print a section heading."""
    console.print(f"\n[heading]{title}[/heading]")
    console.print("[muted]" + "-" * len(title) + "[/muted]")


def print_key_value(key: str, value: str, key_width: int = 20) -> None:
    """Print a key-value pair."""
    console.print(f"[muted]{key:<{key_width}}[/muted] {value}")


def create_metrics_table(title: str = "Metrics") -> Table:
    """Create a two-column table of final metrics."""
    table = Table(title=title, show_header=True, header_style="bold")
    table.add_column("Metric", style="muted")
    table.add_column("Value", justify="right")
    return table


def create_ablation_table(title: str = "Ablation") -> Table:
    """Create a table with one row per cumulative method."""
    table = Table(title=title, show_header=True, header_style="bold")
    table.add_column("Method", style="stage")
    table.add_column("Valid acc", justify="right")
    table.add_column("Test acc", justify="right")
    table.add_column("Seeds", justify="center", width=7)
    return table


def format_percentage(value: float) -> str:
    """Format a fraction as a percentage."""
    return f"{value * 100:.1f}%"


def format_accuracy(mean: float, std: float) -> str:
    """Format mean +- std accuracy; NaN means no completed seed."""
    if mean != mean:
        return "[muted]n/a[/muted]"
    return f"{format_percentage(mean)} [muted]+-{std * 100:.1f}[/muted]"
