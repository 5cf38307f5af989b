"""Lookup-table approximate matrix multiplication for MLP layers.

Thin wrapper over the C++ core. Matrices are float64 numpy arrays (copied in
and out); library errors surface as ValueError (bad shapes or arguments),
``NumericalError``, ``FormatError`` or their base ``Error``.
"""

from ._core import (
    AmmOperator,
    Dataset,
    Error,
    FormatError,
    MlpModel,
    NumericalError,
    PartitionSpec,
    Rng,
    SingularSystemError,
    corr_squared,
    csv_header,
    deserialize_model,
    fit_amm,
    hungarian_max,
    lac_cost_model,
    load_cifar10,
    load_mnist,
    load_model,
    make_mlp,
    matmul,
    naive_partition,
    opq_partition,
    r2_partition,
    replace_layer,
    ridge_solve,
    run_ablation,
    run_replace_all,
    save_model,
    serialize_model,
    train,
    version,
)

__version__ = version()

__all__ = [name for name in dir() if not name.startswith("_")]
