"""Minimal column-oriented data table used throughout the package.

Columns are 1-D numpy arrays of equal length. Non-numeric CSV columns are
recoded to 1-based integer levels (sorted lexicographically) so they can be
used as grouping or factor variables; the label mapping is kept in
``levels``.
"""

import csv
import io

import numpy as np


class DataTable:

    def __init__(self, columns, levels=None):
        self._columns = {}
        n = None
        for name, values in columns.items():
            arr = np.asarray(values)
            if arr.ndim != 1:
                raise ValueError(f"column {name!r} is not 1-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError(
                    f"column {name!r} has length {arr.shape[0]}, expected {n}"
                )
            self._columns[name] = arr
        self.levels = dict(levels) if levels else {}

    @property
    def n(self):
        if not self._columns:
            return 0
        return next(iter(self._columns.values())).shape[0]

    @property
    def names(self):
        return list(self._columns)

    def __contains__(self, name):
        return name in self._columns

    def __getitem__(self, name):
        try:
            return self._columns[name]
        except KeyError:
            raise KeyError(f"no column named {name!r}") from None

    def column(self, name):
        return self[name]

    def with_column(self, name, values):
        cols = dict(self._columns)
        cols[name] = np.asarray(values)
        return DataTable(cols, self.levels)

    def subset(self, rows):
        rows = np.asarray(rows)
        cols = {name: arr[rows] for name, arr in self._columns.items()}
        return DataTable(cols, self.levels)

    def to_csv(self, path_or_file):
        if hasattr(path_or_file, "write"):
            self._write_csv(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as fh:
                self._write_csv(fh)

    def _write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.names)
        arrays = list(self._columns.values())
        integral = [np.issubdtype(a.dtype, np.integer) for a in arrays]
        for i in range(self.n):
            row = []
            for arr, is_int in zip(arrays, integral):
                v = arr[i]
                row.append(int(v) if is_int else repr(float(v)))
            writer.writerow(row)

    def to_csv_text(self):
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path_or_file):
        """Read a headed CSV. Numeric columns parse as floats (integral
        values stay integer typed); anything else is level-coded."""
        if hasattr(path_or_file, "read"):
            return cls._read_csv(path_or_file)
        with open(path_or_file, newline="") as fh:
            return cls._read_csv(fh)

    @classmethod
    def _read_csv(cls, fh):
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV: a header row is required") from None
        raw = {name: [] for name in header}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"CSV row has {len(row)} fields, header has {len(header)}"
                )
            for name, value in zip(header, row):
                raw[name].append(value)
        columns, levels = {}, {}
        for name, values in raw.items():
            try:
                arr = np.array([float(v) for v in values])
            except ValueError:
                labels = sorted(set(values))
                code = {lab: k + 1 for k, lab in enumerate(labels)}
                columns[name] = np.array([code[v] for v in values], dtype=np.int64)
                levels[name] = labels
                continue
            if arr.size and np.all(arr == np.round(arr)) and np.all(np.abs(arr) < 2**53):
                columns[name] = arr.astype(np.int64)
            else:
                columns[name] = arr
        return cls(columns, levels)
