"""Result rows shared by the PIM engine and the reference executor."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AvgValue:
    """Exact average as a rational, with a float quotient for convenience."""

    num: int
    den: int

    @property
    def value(self) -> float:
        return self.num / self.den

    def close_to(self, other: "AvgValue", rel: float = 1e-9) -> bool:
        if self.num * other.den == other.num * self.den:
            return True
        a, b = self.value, other.value
        return abs(a - b) <= rel * max(abs(a), abs(b))

    def __str__(self):
        return f"{self.num}/{self.den} ({self.value:.6g})"


Cell = "int | None | AvgValue"


def cell_to_json(v):
    if isinstance(v, AvgValue):
        return {"num": v.num, "den": v.den, "value": v.value}
    return v


class ResultTable:
    """Ordered (group key, aggregate values) rows with column names.

    Rows are sorted by group key, making tables directly comparable.
    """

    def __init__(self, columns: tuple[str, ...], rows: list[tuple], n_group_cols: int):
        self.columns = tuple(columns)
        self.n_group_cols = n_group_cols
        self.rows = sorted(rows, key=lambda r: r[:n_group_cols])
        keys = [r[:n_group_cols] for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate group keys in result")

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return (
            isinstance(other, ResultTable)
            and self.columns == other.columns
            and self.rows == other.rows
        )

    def __repr__(self):
        return f"ResultTable({self.columns}, {len(self.rows)} rows)"

    def group_keys(self) -> set[tuple]:
        return {r[: self.n_group_cols] for r in self.rows}

    def approx_equal(self, other: "ResultTable", rel: float = 1e-9) -> bool:
        """Exact on integers, within ``rel`` on averages."""
        if self.columns != other.columns or len(self.rows) != len(other.rows):
            return False
        for mine, theirs in zip(self.rows, other.rows):
            for a, b in zip(mine, theirs):
                if isinstance(a, AvgValue) and isinstance(b, AvgValue):
                    if not a.close_to(b, rel):
                        return False
                elif a != b:
                    return False
        return True

    def to_json_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "group_columns": self.n_group_cols,
            "rows": [[cell_to_json(v) for v in r] for r in self.rows],
        }
