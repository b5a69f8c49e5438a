"""CSV and JSON-sidecar plumbing shared by every artifact writer and loader."""
import csv
import json
import math
import os
from typing import Callable, Iterable, Iterator, List, Sequence, Tuple

from .errors import SchemaError
from .utils import format_float


def sidecar_path(path) -> str:
    root, _ = os.path.splitext(str(path))
    return root + '.json'


def write_json(path, data: dict):
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write('\n')


def read_json(path) -> dict:
    if not os.path.exists(path):
        raise SchemaError(path, 0, '', 'file not found')
    with open(path, 'r', encoding='utf-8') as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(path, e.lineno, '', f"invalid JSON: {e.msg}")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    """Write rows with floats at 17 significant digits; ints are written as-is."""
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, str)) and not isinstance(v, bool) else format_float(v)
                             for v in row])


def read_csv(path, check_header: Callable[[List[str]], bool], header_hint: str,
             allow_nan: bool = False) -> Tuple[List[str], Iterator[Tuple[int, str, List[float]]]]:
    """Validate the header and return it with a generator of (line_no, raw_line, floats).

    The generator raises SchemaError at the first row with the wrong width, a
    non-numeric cell, or (unless ``allow_nan``) a NaN/inf value.
    """
    if not os.path.exists(path):
        raise SchemaError(path, 0, '', 'file not found')
    fh = open(path, 'r', newline='', encoding='utf-8')
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise SchemaError(path, 1, '', f"empty file, expected header {header_hint}")
    header = [h.strip() for h in header]
    if not check_header(header):
        fh.close()
        raise SchemaError(path, 1, ','.join(header), f"malformed header, expected {header_hint}")

    def rows():
        with fh:
            for line_no, row in enumerate(reader, start=2):
                raw = ','.join(row)
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise SchemaError(path, line_no, raw, f"expected {len(header)} columns, got {len(row)}")
                try:
                    values = [float(c) for c in row]
                except ValueError:
                    raise SchemaError(path, line_no, raw, 'non-numeric value')
                if not allow_nan and any(not math.isfinite(v) for v in values):
                    raise SchemaError(path, line_no, raw, 'NaN or infinite value')
                yield line_no, raw, values

    return header, rows()


def read_header(path) -> List[str]:
    if not os.path.exists(path):
        raise SchemaError(path, 0, '', 'file not found')
    with open(path, 'r', newline='', encoding='utf-8') as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(path, 1, '', 'empty file')
    return [h.strip() for h in header]
