"""
Spectra dataset type and CSV ingestion.

The file layout is wide: the first row holds the r wavelengths and every
following row one curve. An optional label column lets a mixed file be
subset to one class of samples before the column is dropped.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from app.errors import DataError, InputError

FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class SpectraDataset:
    """
    n curves observed on a shared ascending grid.

    Attributes:
        grid: r ascending grid points (wavelengths)
        curves: n x r matrix, one curve per row
    """

    grid: np.ndarray
    curves: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).ravel()
        curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        if grid.size < 2:
            raise InputError("a dataset needs at least two grid points")
        if curves.shape[0] < 1 or curves.shape[1] != grid.size:
            raise InputError(
                f"curves have shape {curves.shape}, expected (n, {grid.size})"
            )
        if np.any(np.diff(grid) <= 0):
            raise InputError("grid must be strictly ascending")
        if not np.all(np.isfinite(curves)):
            raise InputError("curves contain missing or non-finite values")
        grid.setflags(write=False)
        curves.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "curves", curves)

    @property
    def n_curves(self) -> int:
        return self.curves.shape[0]

    @property
    def n_points(self) -> int:
        return self.grid.size

    def normalized(self) -> "SpectraDataset":
        """Rescale every curve to unit trapezoidal area."""
        areas = trapezoid(self.curves, self.grid, axis=1)
        if np.any(areas == 0):
            raise InputError("cannot normalize a curve with zero area")
        return SpectraDataset(self.grid, self.curves / areas[:, None])


def _not_a_float(cell: str) -> bool:
    try:
        return not np.isfinite(float(cell))
    except ValueError:
        return True


def _to_float(
    frame: pd.DataFrame, row_numbers: List[int], col_numbers: List[int]
) -> np.ndarray:
    try:
        values = frame.astype(float).to_numpy()
        bad = ~np.isfinite(values)
    except ValueError:
        bad = frame.apply(lambda col: col.map(_not_a_float)).to_numpy(dtype=bool)
    if not bad.any():
        return values
    r, c = np.argwhere(bad)[0]
    raise DataError(
        f"non-numeric or missing value '{frame.iat[r, c]}'",
        row=row_numbers[r],
        column=col_numbers[c],
    )


def load_spectra(
    path: Path,
    fmt: str = "csv",
    normalize: bool = False,
    label_column: Optional[str] = None,
    label_value: Optional[str] = None,
) -> SpectraDataset:
    """
    Read a wide CSV of spectra.

    Args:
        path: CSV file, first row wavelengths, one curve per following row
        fmt: File format, only "csv" is supported
        normalize: Rescale every curve to unit area under the curve
        label_column: Header name of a label column to filter on
        label_value: Keep only rows whose label equals this value

    Returns:
        SpectraDataset

    Raises:
        DataError: On ragged rows, non-numeric cells or a bad grid, with the
            1-based row/column of the problem when it is known
    """
    if fmt != "csv":
        raise InputError(f"unsupported dataset format '{fmt}'")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"dataset file is empty: {path}")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataError(
            f"ragged row in {path}", row=int(match.group(1)) if match else None
        )
    missing = raw.isna().to_numpy()
    if missing.any():
        r, c = np.argwhere(missing)[0]
        raise DataError(f"ragged row in {path}", row=int(r) + 1, column=int(c) + 1)
    raw = raw.apply(lambda col: col.str.strip())

    row_numbers = list(range(1, len(raw) + 1))
    col_numbers = list(range(1, raw.shape[1] + 1))
    if label_column is not None:
        header = raw.iloc[0].tolist()
        if label_column not in header:
            raise DataError(f"label column '{label_column}' not found", row=1)
        label_idx = header.index(label_column)
        labels = raw.iloc[1:, label_idx]
        if label_value is not None:
            labels = labels[labels == label_value]
        if labels.empty:
            raise DataError(f"no rows with {label_column} = {label_value}")
        keep = [0] + labels.index.tolist()
        raw = raw.loc[keep].drop(columns=raw.columns[label_idx])
        row_numbers = [i + 1 for i in keep]
        del col_numbers[label_idx]

    if len(raw) < 2:
        raise DataError(f"{path} holds a grid row but no curves")

    grid = _to_float(raw.iloc[[0]], row_numbers[:1], col_numbers)[0]
    curves = _to_float(raw.iloc[1:], row_numbers[1:], col_numbers)
    steps = np.diff(grid)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise DataError("grid is not strictly ascending", row=1, column=col_numbers[bad])

    dataset = SpectraDataset(grid, curves)
    return dataset.normalized() if normalize else dataset


def write_spectra(dataset: SpectraDataset, path: Path) -> None:
    """Write a dataset in the layout load_spectra reads."""
    table = np.vstack([dataset.grid, dataset.curves])
    np.savetxt(path, table, delimiter=",", fmt=FLOAT_FORMAT)
