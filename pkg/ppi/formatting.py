"""Markdown rendering of nested result dictionaries for tool and report output."""
import numpy as np


def _scalar(value, digits: int) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{digits}f}"
    if isinstance(value, np.integer):
        return str(int(value))
    return f"{value}"


def format_markdown(data, level: int = 1, digits: int = 4) -> str:
    """Format a dictionary as a Markdown string.

    Args:
        data: Dictionary to format
        level: Current header level (defaults to 1)
        digits: Decimal places for floating-point values

    Returns:
        Markdown-formatted string representation of the dictionary
    """
    if not isinstance(data, dict):
        return f"```\n{data}\n```"

    result = []
    for key, value in data.items():
        if level <= 6:
            result.append(f"{'#' * level} {key}")
        else:
            result.append(f"**{key}**")

        if isinstance(value, np.ndarray):
            value = value.tolist()
        if isinstance(value, dict):
            result.append(format_markdown(value, level + 1, digits))
        elif isinstance(value, (list, tuple)):
            if not value:
                result.append("*No items*")
            else:
                for item in value:
                    if isinstance(item, dict):
                        result.append("* " + format_markdown(item, level + 1, digits).replace("\n", "\n  "))
                    else:
                        result.append(f"* {_scalar(item, digits)}")
        elif value is None:
            result.append("*None*")
        else:
            result.append(_scalar(value, digits))

        result.append("")

    return "\n".join(result)


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Render a list of flat records as a pipe table."""
    if not rows:
        return "*No rows*"
    columns = columns or list(rows[0])
    lines = [
        "| " + " | ".join(columns) + " |",
        "|" + "|".join("---" for _ in columns) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(_scalar(row.get(c, ""), 2) for c in columns) + " |")
    return "\n".join(lines)
