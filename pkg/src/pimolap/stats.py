"""Counters for data crossing the PIM/host boundary and for in-memory work."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class TransferStats:
    """Monotone counters accumulated while loading data and running queries.

    ``host_baseline_bits`` is filled in by the reference engine: the bits a
    host-only scan would have to pull from memory for the same query.
    """

    pim_to_host_bits: int = 0
    host_to_pim_bits: int = 0
    pim_col_ops: int = 0
    cell_writes: int = 0
    host_baseline_bits: int = 0

    def copy(self) -> "TransferStats":
        return TransferStats(
            self.pim_to_host_bits,
            self.host_to_pim_bits,
            self.pim_col_ops,
            self.cell_writes,
            self.host_baseline_bits,
        )

    def delta(self, since: "TransferStats") -> "TransferStats":
        """Counter difference ``self - since`` (e.g. query-phase stats)."""
        return TransferStats(
            self.pim_to_host_bits - since.pim_to_host_bits,
            self.host_to_pim_bits - since.host_to_pim_bits,
            self.pim_col_ops - since.pim_col_ops,
            self.cell_writes - since.cell_writes,
            self.host_baseline_bits - since.host_baseline_bits,
        )

    @property
    def moved_bits(self) -> int:
        """Total bits crossing the boundary in either direction."""
        return self.pim_to_host_bits + self.host_to_pim_bits

    def as_dict(self) -> dict:
        return {
            "pim_to_host_bits": self.pim_to_host_bits,
            "host_to_pim_bits": self.host_to_pim_bits,
            "pim_col_ops": self.pim_col_ops,
            "cell_writes": self.cell_writes,
            "host_baseline_bits": self.host_baseline_bits,
        }
