"""
Excel export of evaluation reports.

The workbook has two sheets:
- Utterances: one row per scored signal (system, utterance, target, metrics)
- Summary: one row per system in the objective-table layout
  (System | Speech SI-SDR | Speech PESQ | Background SI-SDR | Background PESQ)
"""

import logging
from typing import Iterable, List

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

from models.data_models import EvalReport, atomic_write

logger = logging.getLogger(__name__)

SUMMARY_HEADERS = ["System", "Speech SI-SDR", "Speech PESQ", "Background SI-SDR", "Background PESQ"]
ROW_HEADERS = {
    "system": "System",
    "utterance_id": "Utterance",
    "target": "Target",
    "si_sdr_db": "SI-SDR (dB)",
    "pesq": "PESQ",
    "mel_l1": "Mel L1",
}
SUMMARY_KEYS = ["system", "speech_si_sdr_db", "speech_pesq", "background_si_sdr_db", "background_pesq"]

# -- Style definitions --
HEADER_FONT = Font(name="Calibri", size=11, bold=True, color="FFFFFF")
HEADER_FILL = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
HEADER_ALIGNMENT = Alignment(horizontal="center", vertical="center", wrap_text=True)
CELL_ALIGNMENT = Alignment(vertical="top")
THIN_BORDER = Border(
    left=Side(style="thin"),
    right=Side(style="thin"),
    top=Side(style="thin"),
    bottom=Side(style="thin"),
)
NUMBER_FORMAT = "0.00"


def _write_sheet(ws: Worksheet, headers: List[str], rows: Iterable[list]) -> None:
    for col_idx, header in enumerate(headers, 1):
        cell = ws.cell(row=1, column=col_idx, value=header)
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.alignment = HEADER_ALIGNMENT
        cell.border = THIN_BORDER

    for row_idx, values in enumerate(rows, 2):
        for col_idx, value in enumerate(values, 1):
            # missing metrics stay as empty cells
            cell = ws.cell(row=row_idx, column=col_idx, value=value)
            cell.alignment = CELL_ALIGNMENT
            cell.border = THIN_BORDER
            if isinstance(value, float):
                cell.number_format = NUMBER_FORMAT

    for col_idx in range(1, len(headers) + 1):
        max_length = len(headers[col_idx - 1])
        for row in ws.iter_rows(min_row=2, min_col=col_idx, max_col=col_idx):
            for cell in row:
                if cell.value is not None:
                    max_length = max(max_length, len(str(cell.value)))
        ws.column_dimensions[get_column_letter(col_idx)].width = min(max_length + 4, 60)
    ws.freeze_panes = "A2"


def export_report(report: EvalReport, output_path: str) -> None:
    """
    Export an evaluation report to an Excel file.

    The PESQ columns of the Utterances sheet are present only when an
    external scorer produced values; the Summary sheet always keeps the
    five-column layout so several systems line up side by side.

    Args:
        report: The report to export (several systems may be merged in).
        output_path: Path of the ``.xlsx`` file.

    Raises:
        ValueError: If the report has no rows.
        OSError: If the file cannot be written.
    """
    if not report.rows:
        raise ValueError("cannot export an empty report")
    wb = Workbook()

    ws_rows = wb.active
    ws_rows.title = "Utterances"
    columns = report.columns()
    _write_sheet(
        ws_rows,
        [ROW_HEADERS[c] for c in columns],
        ([row.to_dict()[c] for c in columns] for row in report.rows + report.aggregate()),
    )

    ws_summary = wb.create_sheet(title="Summary")
    _write_sheet(
        ws_summary,
        SUMMARY_HEADERS,
        ([entry.get(key) for key in SUMMARY_KEYS] for entry in report.summary_table()),
    )

    atomic_write(output_path, wb.save, binary=True)
    logger.info("[Report] wrote %s (%d rows, %d systems)", output_path, len(report.rows), len(report.systems()))
