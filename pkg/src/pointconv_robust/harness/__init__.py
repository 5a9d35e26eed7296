"""MNIST ingestion, robustness protocols, reports and the command line."""

from .data import (
    IdxError,
    load_idx,
    load_mnist,
    make_dataset,
    read_idx,
    rescale_image,
    rotate_pointcloud,
    split_indices,
    write_idx,
)
from .protocol import (
    ROTATION_PROTOCOL,
    SCALE_PROTOCOL,
    RobustnessProtocol,
    protocol_preset,
    run_protocol,
    variant_name,
)
from .report import ReportRow, RobustnessReport, emit_report, load_report, report_csv

__all__ = [
    "IdxError", "load_idx", "load_mnist", "make_dataset", "read_idx", "write_idx", "rescale_image",
    "rotate_pointcloud", "split_indices", "RobustnessProtocol", "SCALE_PROTOCOL", "ROTATION_PROTOCOL",
    "protocol_preset", "run_protocol", "variant_name", "ReportRow", "RobustnessReport", "emit_report",
    "load_report", "report_csv",
]
