import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd

from convex_core import PolyhedralPotential
from errors import FileFormatError, InvalidMeasureError, InvalidPotentialError
from measures import DiscreteMeasure

LEDGER_COLUMNS = ["name", "seed", "lhs", "rhs", "margin", "tolerance", "passed"]
TRACE_COLUMNS = ["iteration", "objective", "grad_inf_norm", "step"]
CELL_COLUMNS = ["atom_index", "bounded", "mass", "vertices", "rays"]
FLOAT_FORMAT = "%.17g"


class FileProcessor:
    """Reads and writes every file the toolkit exchanges: measures, potentials, traces, cells, clouds and ledgers"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    # -- JSON -------------------------------------------------------------------

    def load_json(self, file_path):
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                data = json.load(f)
            self.logger.info(f"Read JSON file: {file_path}")
            return data
        except json.JSONDecodeError as e:
            self.logger.error(f"Malformed JSON in {file_path}: {str(e)}")
            raise FileFormatError(f"Malformed JSON in {file_path}: {e}") from e
        except OSError as e:
            self.logger.error(f"Error reading file {file_path}: {str(e)}")
            raise

    def save_json(self, data, file_path):
        """Write a JSON document; floats keep their shortest round-trip repr"""
        try:
            self._ensure_parent(file_path)
            with open(file_path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, allow_nan=True)
            self.logger.info(f"Wrote {file_path}")
            return file_path
        except Exception as e:
            self.logger.error(f"Error writing {file_path}: {str(e)}")
            raise

    # -- measures -------------------------------------------------------------

    def load_measure(self, file_path) -> DiscreteMeasure:
        """
        Load a target measure from JSON ({"dim", "atoms", "weights"}) or CSV

        CSV files hold one atom per row, coordinates first and the weight in
        the last column; a header row is optional.

        Raises:
            FileFormatError: the file cannot be parsed
            InvalidMeasureError: the parsed data is not a valid measure
        """
        if self.is_json(file_path):
            data = self.load_json(file_path)
            if not isinstance(data, dict):
                raise FileFormatError(f"{file_path}: expected a JSON object with atoms and weights")
            return DiscreteMeasure.from_dict(data)
        table = self._read_numeric_csv(file_path)
        if table.shape[1] < 2:
            self.logger.error(f"Measure file {file_path} needs coordinate columns and a weight column")
            raise FileFormatError(f"{file_path}: need at least one coordinate column and a weight column")
        return DiscreteMeasure(table[:, :-1], table[:, -1])

    def save_measure(self, measure: DiscreteMeasure, file_path):
        if self.is_json(file_path):
            return self.save_json(measure.to_dict(), file_path)
        columns = [f"y{j}" for j in range(measure.dim)]
        df = pd.DataFrame(measure.atoms, columns=columns)
        df["weight"] = measure.weights
        return self._write_csv(df, file_path)

    def save_cloud(self, estimate, file_path):
        """Moment-measure estimate as a measure CSV (atoms with zero weight are dropped)"""
        return self.save_measure(estimate.to_measure(), file_path)

    # -- potentials -----------------------------------------------------------

    def load_potential(self, file_path) -> PolyhedralPotential:
        data = self.load_json(file_path)
        if not isinstance(data, dict):
            raise FileFormatError(f"{file_path}: expected a JSON object with atoms and values")
        return PolyhedralPotential.from_dict(data)

    def save_potential(self, potential: PolyhedralPotential, file_path):
        return self.save_json(potential.to_dict(), file_path)

    # -- tables -----------------------------------------------------------------

    def save_trace(self, report, file_path):
        return self._write_csv(pd.DataFrame(report.trace_records(), columns=TRACE_COLUMNS), file_path)

    def save_cells(self, decomposition, file_path):
        return self._write_csv(pd.DataFrame(decomposition.to_records(), columns=CELL_COLUMNS), file_path)

    def save_ledger(self, results, file_path):
        """
        Write check results to a ledger CSV

        Args:
            results (list): CheckResult objects
            file_path (str): destination

        Returns:
            str: file_path
        """
        df = pd.DataFrame([r.to_record() for r in results], columns=LEDGER_COLUMNS)
        return self._write_csv(df, file_path)

    def load_table(self, file_path, required_columns=None):
        """Read a CSV written by this class into a DataFrame"""
        try:
            df = pd.read_csv(file_path)
            self.logger.info(f"Read CSV file: {file_path} with {len(df)} rows")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            self.logger.error(f"Error reading or processing file {file_path}: {str(e)}")
            raise FileFormatError(f"Could not parse {file_path}: {e}") from e
        missing = [c for c in (required_columns or []) if c not in df.columns]
        if missing:
            self.logger.error(f"Missing required columns in {file_path}: {missing}")
            raise FileFormatError(f"{file_path} is missing columns {missing}")
        return df

    def validate_csv_structure(self, file_path, kind="measure"):
        """
        Validate that a CSV file has the structure expected for its kind

        Args:
            file_path (str): Path to the CSV file
            kind (str): measure, trace, cells or ledger

        Returns:
            bool: True if structure is valid, False otherwise
        """
        required = {"trace": TRACE_COLUMNS, "cells": CELL_COLUMNS, "ledger": LEDGER_COLUMNS}
        try:
            if kind == "measure":
                self.load_measure(file_path)
            else:
                self.load_table(file_path, required[kind])
            return True
        except (FileFormatError, InvalidMeasureError, InvalidPotentialError, KeyError, OSError) as e:
            self.logger.error(f"Error validating CSV structure: {str(e)}")
            return False

    # -- hashing ---------------------------------------------------------------

    def sha256(self, file_path):
        digest = hashlib.sha256()
        with open(file_path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                digest.update(chunk)
        return digest.hexdigest()

    # -- helpers -----------------------------------------------------------------

    @staticmethod
    def is_json(file_path):
        return os.path.splitext(str(file_path))[1].lower() == ".json"

    @staticmethod
    def _ensure_parent(file_path):
        parent = os.path.dirname(os.path.abspath(str(file_path)))
        os.makedirs(parent, exist_ok=True)

    def _write_csv(self, df, file_path):
        try:
            self._ensure_parent(file_path)
            df.to_csv(file_path, index=False, float_format=FLOAT_FORMAT)
            self.logger.info(f"Wrote {file_path} with {len(df)} rows")
            return file_path
        except Exception as e:
            self.logger.error(f"Error writing {file_path}: {str(e)}")
            raise

    def _read_numeric_csv(self, file_path):
        try:
            df = pd.read_csv(file_path, header=None, dtype=str, skipinitialspace=True)
            self.logger.info(f"Read CSV file: {file_path} with {len(df)} rows")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            self.logger.error(f"Error reading or processing file {file_path}: {str(e)}")
            raise FileFormatError(f"Could not parse {file_path}: {e}") from e
        # optional header: a first row that is not numeric
        first = pd.to_numeric(df.iloc[0], errors="coerce") if len(df) else None
        if first is not None and first.isna().any():
            df = df.iloc[1:]
        try:
            table = df.apply(pd.to_numeric).to_numpy(dtype=float)
        except ValueError as e:
            self.logger.error(f"Non-numeric entry in {file_path}: {str(e)}")
            raise FileFormatError(f"Non-numeric entry in {file_path}: {e}") from e
        if table.shape[0] == 0:
            raise FileFormatError(f"{file_path} holds no rows")
        return np.atleast_2d(table)
