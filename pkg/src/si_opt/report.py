"""Artifact emission for study reports."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .channel import transfer_function, write_rlgc_csv, write_transfer_csv
from .measure import write_eye_csv, write_eye_svg
from .optimize import format_table, write_table_csv
from .units import format_eng
from .waveform import write_csv


class ReportError(OSError):
    pass


def _num(x) -> str:
    if x is None:
        return "n/a"
    x = float(x)
    return "nan" if math.isnan(x) else format_eng(x)


def summary_text(report, cfg=None) -> str:
    lines = [f"study: {report.study}",
             f"result: {'PASS' if report.passed else 'FAIL'}"
             + (" (flagged)" if report.flagged else "")]
    for name, ok in report.checks.items():
        lines.append(f"check {'pass' if ok else 'FAIL'}: {name}")
    if report.baseline_opening is not None:
        lines.append(f"baseline opening: {_num(report.baseline_opening)}V")
        for k, v in report.baseline_receivers.items():
            lines.append(f"  {k}: {_num(v)}V")
    if report.final_opening is not None:
        lines.append(f"final opening: {_num(report.final_opening)}V")
        for k, v in report.receiver_openings.items():
            lines.append(f"  {k}: {_num(v)}V")
    for i, res in enumerate(report.stages, 1):
        lines.append(f"stage {i} {res.name}: {res.status} after {res.iterations} iterations")
    for entry in report.prune_history:
        new = ", ".join(f"{g}={a}" for g, a in sorted(entry["new"].items())) or "nothing new"
        lines.append(f"prune round {entry['round']}: {new}")
    if report.final_values:
        lines.append("final values:")
        for k, v in report.final_values.items():
            lines.append(f"  {k} = {_num(v)}")
    ex = report.extras
    if "touching_edge" in ex:
        lines.append(f"touching edge: {ex['touching_edge']}")
        lines.append(f"AVG opening: {_num(ex['avg_opening'])}V")
        lines.append(f"total length: {_num(ex['link'].total_length)}m")
    if report.sweep_rows:
        lines.append("length_m\twidth_m\topening_V\tstatus")
        for r in report.sweep_rows:
            lines.append(f"{_num(r['length'])}\t{_num(r['width'])}\t{_num(r['opening'])}\t"
                         f"{r['status']}")
    if "n_maxima" in ex:
        lines.append(f"maxima: {ex['n_maxima']}, best delay {_num(ex['best_delay'])}s, "
                     f"period error {ex['period_error']:.3g}")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def emit_report(report, cfg) -> list[Path]:
    """Write tables, CSV/SVG artifacts and ``summary.txt`` under ``cfg.out_dir``.

    Output is a pure function of the report, so reruns give identical bytes.
    """
    out = Path(cfg.out_dir if cfg.out_dir is not None else "si_opt_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
        return _emit(report, cfg, out)
    except OSError as exc:
        raise ReportError(f"cannot write report under {out}: {exc}") from exc


def _emit(report, cfg, out: Path) -> list[Path]:
    csv = cfg.emit in ("csv", "both")
    svg = cfg.emit in ("svg", "both")
    files = []
    for i, res in enumerate(report.stages, 1):
        p = out / f"params_stage{i}.txt"
        p.write_text(format_table(res))
        files.append(p)
        if csv:
            files.append(write_table_csv(out / f"params_stage{i}.csv", res))
    if csv:
        for name, waves in sorted(report.waveforms.items()):
            files.append(write_csv(out / f"waveforms_{name}.csv", waves))
        for name, (eye, _, _) in sorted(report.eyes.items()):
            files.append(write_eye_csv(out / f"eye_{name}.csv", eye))
        if "link" in report.extras:
            link = report.extras["link"]
            freqs = np.linspace(0.0, 4 * link.bit_rate, 401)
            files.append(write_rlgc_csv(out / report.extras["rlgc_file"],
                                        link.line_model(), freqs))
            files.append(write_transfer_csv(out / "transfer.csv", freqs,
                                            transfer_function(link, freqs)))
        if report.sweep_rows:
            p = out / "sweep.csv"
            with p.open("w", newline="\n") as fh:
                fh.write("length_m,total_length_m,width_m,opening_v,feasible,status\n")
                for r in report.sweep_rows:
                    fh.write(f"{float(r['length'])!r},{float(r['total_length'])!r},"
                             f"{float(r['width'])!r},{float(r['opening'])!r},"
                             f"{int(bool(r['feasible']))},{r['status']}\n")
            files.append(p)
        if report.curve:
            p = out / "mask_delay_sweep.csv"
            with p.open("w", newline="\n") as fh:
                fh.write("mask_delay_s,avg_opening_v\n")
                for d, v in report.curve:
                    fh.write(f"{float(d)!r},{float(v)!r}\n")
            files.append(p)
    if svg:
        for name, (eye, mask, vref) in sorted(report.eyes.items()):
            files.append(write_eye_svg(out / f"eye_{name}.svg", eye, mask=mask, vref=vref,
                                       title=f"{report.study} {name}"))
    p = out / "summary.txt"
    p.write_text(summary_text(report, cfg))
    files.append(p)
    return files
