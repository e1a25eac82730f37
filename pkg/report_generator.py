import logging
import os
from datetime import datetime

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils.dataframe import dataframe_to_rows

from file_processor import CELL_COLUMNS, LEDGER_COLUMNS, TRACE_COLUMNS, FileProcessor
from run_manifest import MANIFEST_NAME, RunManifest

SHEET_WIDTH_CAP = 50
SHEET_ROW_CAP = 10000


class ReportGenerator:
    """Turns a run directory into plot-data CSVs, a plain-text summary and a styled workbook"""

    def __init__(self, processor=None):
        self.processor = processor or FileProcessor()
        self.logger = logging.getLogger(__name__)

    def generate_report(self, run_dir):
        """
        Generate plot data and summaries for a run directory

        Args:
            run_dir (str): directory written by a solve, forward, gallery or check run

        Returns:
            list: paths of the files written

        Raises:
            FileNotFoundError: run_dir does not exist
        """
        if not os.path.isdir(run_dir):
            self.logger.error(f"Run directory not found: {run_dir}")
            raise FileNotFoundError(f"Run directory not found: {run_dir}")
        try:
            tables = self._collect_tables(run_dir)
            written = []
            for name, df in tables.items():
                path = os.path.join(run_dir, f"plot_{name}.csv")
                df.to_csv(path, index=False, float_format="%.17g")
                written.append(path)
            summary = self.generate_summary_statistics(run_dir, tables)
            written.append(self._write_summary_text(summary, os.path.join(run_dir, "summary.txt")))
            written.append(self._create_excel_report(tables, summary, os.path.join(run_dir, "summary.xlsx")))
            self.logger.info(f"Report generated successfully in {run_dir} ({len(written)} files)")
            return written
        except Exception as e:
            self.logger.error(f"Error generating report: {str(e)}")
            raise

    # -- plot data ---------------------------------------------------------------

    def _collect_tables(self, run_dir):
        tables = {}
        trace_path = os.path.join(run_dir, "trace.csv")
        if os.path.exists(trace_path):
            trace = self.processor.load_table(trace_path, TRACE_COLUMNS)
            trace["log10_grad_inf_norm"] = np.log10(trace["grad_inf_norm"].clip(lower=1e-300))
            tables["trace"] = trace
        cells_path = os.path.join(run_dir, "cells.csv")
        if os.path.exists(cells_path):
            tables["cells"] = self._cell_polygons(self.processor.load_table(cells_path, CELL_COLUMNS))
        cloud_path = os.path.join(run_dir, "moment_measure.csv")
        if os.path.exists(cloud_path):
            tables["scatter"] = self._scatter(self.processor.load_measure(cloud_path))
        ledger_path = os.path.join(run_dir, "ledger.csv")
        if os.path.exists(ledger_path):
            ledger = self.processor.load_table(ledger_path, LEDGER_COLUMNS)
            tables["ledger"] = ledger.sort_values(["name", "seed"], kind="stable").reset_index(drop=True)
        if not tables:
            self.logger.warning(f"No plottable files found in {run_dir}")
        return tables

    @staticmethod
    def _parse_points(text):
        if not isinstance(text, str) or not text.strip():
            return []
        return [tuple(float(t) for t in pair.split()) for pair in text.split(";")]

    def _cell_polygons(self, cells):
        """One row per polygon vertex; rays are appended as points at unit distance from their base vertex"""
        rows = []
        for _, cell in cells.iterrows():
            vertices = self._parse_points(cell["vertices"])
            for order, (x, y) in enumerate(vertices):
                rows.append({"atom_index": int(cell["atom_index"]), "order": order, "kind": "vertex", "x": x, "y": y})
            rays = self._parse_points(cell["rays"])
            if rays and vertices:
                bases = (vertices[0], vertices[-1])
                for k, ((bx, by), (rx, ry)) in enumerate(zip(bases, rays)):
                    rows.append({"atom_index": int(cell["atom_index"]), "order": len(vertices) + k, "kind": "ray",
                                 "x": bx + rx, "y": by + ry})
        return pd.DataFrame(rows, columns=["atom_index", "order", "kind", "x", "y"])

    @staticmethod
    def _scatter(measure):
        columns = [f"y{j}" for j in range(measure.dim)]
        df = pd.DataFrame(measure.atoms, columns=columns)
        df["weight"] = measure.weights / measure.total_mass
        df["kind"] = "atom"
        bary = pd.DataFrame([measure.barycenter], columns=columns)
        bary["weight"] = 1.0
        bary["kind"] = "barycenter"
        return pd.concat([df, bary], ignore_index=True)

    # -- summaries ---------------------------------------------------------------

    def generate_summary_statistics(self, run_dir, tables=None):
        """
        Key figures of a run

        Args:
            run_dir (str): run directory
            tables (dict): plot tables already collected for the directory

        Returns:
            dict: summary statistics
        """
        tables = tables if tables is not None else self._collect_tables(run_dir)
        summary = {"run_dir": os.path.abspath(run_dir)}
        if os.path.exists(os.path.join(run_dir, MANIFEST_NAME)):
            manifest = RunManifest.load(run_dir, self.processor)
            summary.update({"command": manifest.command, "seed": manifest.seed,
                            "wall_time": manifest.wall_time, "exit_code": manifest.exit_code})
        report_path = os.path.join(run_dir, "report.json")
        if os.path.exists(report_path):
            report = self.processor.load_json(report_path)
            for key in ("converged", "iterations", "final_objective", "final_grad_inf_norm", "quadrature",
                        "total_mass"):
                summary[key] = report.get(key)
        if "trace" in tables:
            objective = tables["trace"]["objective"].to_numpy()
            summary["objective_monotone"] = bool(np.all(np.diff(objective) >= -1e-9 * (1 + np.abs(objective[1:]))))
        if "cells" in tables:
            summary["cells"] = int(tables["cells"]["atom_index"].nunique())
        if "scatter" in tables:
            scatter = tables["scatter"]
            atoms = scatter[scatter["kind"] == "atom"]
            bary = scatter[scatter["kind"] == "barycenter"].drop(columns=["weight", "kind"]).to_numpy()[0]
            summary["points"] = len(atoms)
            summary["barycenter_norm"] = float(np.linalg.norm(bary))
        if "ledger" in tables:
            ledger = tables["ledger"]
            summary["checks"] = len(ledger)
            summary["checks_failed"] = int((~ledger["passed"].astype(bool)).sum())
            summary["min_margin"] = float(ledger["margin"].min()) if len(ledger) else None
        return summary

    def _write_summary_text(self, summary, file_path):
        with open(file_path, "w", encoding="utf-8") as f:
            f.write(f"Run summary generated on {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
            for key, value in summary.items():
                f.write(f"{key}: {value}\n")
        self.logger.info(f"Wrote {file_path}")
        return file_path

    # -- workbook ------------------------------------------------------------------

    def _create_excel_report(self, tables, summary, file_path):
        """
        Create an Excel workbook with a summary sheet and one sheet per plot table

        Args:
            tables (dict): name -> DataFrame
            summary (dict): summary statistics
            file_path (str): Path to save the Excel file
        """
        try:
            wb = Workbook()
            ws = wb.active
            ws.title = "Summary"
            summary_df = pd.DataFrame([{"Item": k, "Value": str(v)} for k, v in summary.items()])
            self._fill_sheet(ws, "Run Summary", summary_df)
            for name, df in tables.items():
                if len(df) > SHEET_ROW_CAP:
                    self.logger.info(f"Sheet {name} truncated to {SHEET_ROW_CAP} rows; the CSV holds all {len(df)}")
                self._fill_sheet(wb.create_sheet(title=name.capitalize()), f"{name.capitalize()} Data",
                                 df.head(SHEET_ROW_CAP))
            wb.save(file_path)
            self.logger.info(f"Wrote {file_path}")
            return file_path
        except Exception as e:
            self.logger.error(f"Error creating Excel report: {str(e)}")
            raise

    @staticmethod
    def _fill_sheet(ws, title, df):
        width = max(len(df.columns), 1)
        title_cell = ws.cell(row=1, column=1, value=title)
        title_cell.font = Font(size=16, bold=True)
        ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=max(width, 2))
        ws.cell(row=1, column=1).alignment = Alignment(horizontal="center")

        date_cell = ws.cell(row=2, column=1, value=f"Generated on: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        date_cell.font = Font(italic=True)
        ws.merge_cells(start_row=2, start_column=1, end_row=2, end_column=max(width, 2))
        ws.cell(row=2, column=1).alignment = Alignment(horizontal="center")

        header_font = Font(bold=True)
        header_fill = PatternFill(start_color="CCCCCC", end_color="CCCCCC", fill_type="solid")
        for col, header in enumerate(df.columns, 1):
            cell = ws.cell(row=4, column=col, value=str(header))
            cell.font = header_font
            cell.fill = header_fill
            cell.alignment = Alignment(horizontal="center")

        for row_idx, row_data in enumerate(dataframe_to_rows(df, index=False, header=False), 5):
            for col_idx, value in enumerate(row_data, 1):
                if isinstance(value, np.generic):
                    value = value.item()
                ws.cell(row=row_idx, column=col_idx, value=value)

        # merged title cells have no column_letter; size columns from the header row down
        for col_idx in range(1, width + 1):
            letter = ws.cell(row=4, column=col_idx).column_letter
            lengths = [len(str(ws.cell(row=r, column=col_idx).value)) for r in range(4, ws.max_row + 1)
                       if ws.cell(row=r, column=col_idx).value is not None]
            ws.column_dimensions[letter].width = min(max(lengths, default=0) + 2, SHEET_WIDTH_CAP)
