"""Functional simulator of a bulk-bitwise processing-in-memory module
with an analytical (OLAP-style) query engine on top.

Layers, bottom to top:

* :mod:`pimolap.crossbar` - memory cell arrays executing column-wise logic ops
* :mod:`pimolap.layout` - mapping relations onto cell arrays, transfer facade
* :mod:`pimolap.isa` - compiling predicates/arithmetic/aggregation to column ops
* :mod:`pimolap.queryparse` - small SQL subset front end
* :mod:`pimolap.schema` - star-schema generation, CSV loading, pre-join
* :mod:`pimolap.oracle` - host-only reference engine (ground truth)
* :mod:`pimolap.engine` - planner and executor, hybrid GROUP-BY
* :mod:`pimolap.cli` - command-line entry point
"""

from .crossbar import CellArray, ColOp, OpKind
from .stats import TransferStats

__all__ = ["CellArray", "ColOp", "OpKind", "TransferStats"]

__version__ = "0.1.0"
