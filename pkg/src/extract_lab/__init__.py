"""Limited-query GNN model extraction toolkit.

Modules, bottom-up: ``numkit`` (products, losses, Adam, portable RNG), ``graphcore``
(graphs, datasets, splits), ``gnn`` (GCN / SAGE / GIN with manual backward), ``ssl``
(local encoder pre-training), ``selection`` (k-means and baseline query selection),
``attack`` (pipeline, defense, perturbations), ``evaluation`` (metrics, McNemar, CSV),
``serve`` (HTTP victim and client), ``experiments`` (scenarios and grids), ``cli``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ArgumentError,
    BudgetError,
    ConfigError,
    ExtractLabError,
    FormatError,
    IoError,
    LoadError,
    NumericError,
    ProtocolError,
    ShapeError,
    TransportError,
)
