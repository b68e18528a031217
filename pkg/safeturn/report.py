"""Comparison tables: column layout shared by the CSV and the Excel workbook."""

from __future__ import annotations

import math
from io import BytesIO
from pathlib import Path

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

# (column key, header, number format)
TABLE_COLUMNS = [
    ("agent", "Agent", None),
    ("layout", "Layout", None),
    ("episodes", "Episodes", "0"),
    ("success_pct", "Success (%)", "0.0"),
    ("collision_pct", "Collision (%)", "0.0"),
    ("timeout_pct", "Timeout (%)", "0.0"),
    ("speed_violation_pct", "Speed violation (%)", "0.0"),
    ("crossing_time_s", "Crossing time (s)", "0.00"),
    ("crossing_speed_mps", "Crossing speed (m/s)", "0.00"),
    ("avg_distance_m", "Avg. distance to closest pedestrian (m)", "0.00"),
]
TABLE_KEYS = [key for key, _, _ in TABLE_COLUMNS]


def table_frame(rows) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=TABLE_KEYS)


def create_excel_table(rows, title: str = "Left-turn agent comparison", notes: dict = None) -> BytesIO:
    """Styled workbook with an optional parameter block above the comparison table."""
    wb = Workbook()
    ws = wb.active
    ws.title = "Comparison"

    border = Border(left=Side(style="thin"), right=Side(style="thin"),
                    top=Side(style="thin"), bottom=Side(style="thin"))
    header_fill = PatternFill(start_color="D9E1F2", end_color="D9E1F2", fill_type="solid")
    center_align = Alignment(horizontal="center", vertical="center", wrap_text=True)
    right_align = Alignment(horizontal="right", vertical="center")

    last_col = get_column_letter(len(TABLE_COLUMNS))
    ws.merge_cells(f"A1:{last_col}1")
    ws["A1"] = title
    ws["A1"].font = Font(bold=True, size=16)
    ws["A1"].alignment = center_align

    start_row = 3
    for i, (label, value) in enumerate((notes or {}).items()):
        ws.cell(row=start_row + i, column=1, value=str(label)).font = Font(bold=True)
        ws.cell(row=start_row + i, column=2, value=str(value))
    if notes:
        start_row += len(notes) + 1

    for col_idx, (_, header, _) in enumerate(TABLE_COLUMNS, 1):
        cell = ws.cell(row=start_row, column=col_idx, value=header)
        cell.fill = header_fill
        cell.font = Font(bold=True)
        cell.border = border
        cell.alignment = center_align

    for row_offset, row in enumerate(rows, 1):
        for col_idx, (key, _, number_format) in enumerate(TABLE_COLUMNS, 1):
            value = row.get(key)
            if isinstance(value, float) and math.isnan(value):
                value = None
            cell = ws.cell(row=start_row + row_offset, column=col_idx, value=value)
            cell.border = border
            if number_format:
                cell.number_format = number_format
                cell.alignment = right_align
            else:
                cell.alignment = center_align

    ws.column_dimensions["A"].width = 20
    ws.column_dimensions["B"].width = 12
    for col_idx in range(3, len(TABLE_COLUMNS) + 1):
        ws.column_dimensions[get_column_letter(col_idx)].width = 16

    output = BytesIO()
    wb.save(output)
    output.seek(0)
    return output


def write_excel_table(rows, path, title: str = "Left-turn agent comparison", notes: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(create_excel_table(rows, title, notes).getvalue())
    return path


def format_table(rows) -> str:
    """Plain-text rendering for the terminal."""
    frame = table_frame(rows).rename(columns={key: header for key, header, _ in TABLE_COLUMNS})
    return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}")
