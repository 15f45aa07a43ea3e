"""CSV output shared by the experiment writers: '#' metadata lines, a header row, then data."""
import csv


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    if hasattr(x, "item"):
        return _fmt(x.item())
    return str(x)


def write_csv(path, columns, rows, meta=None, header_lines=()):
    """Write ``rows`` under ``columns``.

    ``header_lines`` are emitted first (without the leading '#'), then one
    ``# key=value`` line per ``meta`` entry.
    """
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={_fmt(value)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def read_csv(path):
    """Return (meta dict, columns, rows of strings); '#' lines without '=' are skipped."""
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                text = line[1:].strip()
                if "=" in text:
                    key, _, value = text.partition("=")
                    meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]
