"""Command line: convert release files to .hds and validate containers."""

from __future__ import annotations

import argparse
import sys

from .convert import ConversionSpec, convert, validate_roundtrip


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hds-convert",
        description="Convert SOFA/HDF5 or CIPIC-style .mat HRTF releases into "
                    "the portable .hds container",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="input files, one subject each")
    p.add_argument("--anthro", help="CSV keyed subject_id, ear, then the 23 names")
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--bins", type=int, default=128)
    p.add_argument("--fmax", type=float, default=20000.0)
    p.add_argument("--subjects", nargs="*", default=[],
                   help="optional subject id allowlist")
    p.add_argument("--out", required=True, help="output .hds path")

    v = sub.add_parser("validate")
    v.add_argument("path", help=".hds file to check")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "convert":
        spec = ConversionSpec(
            input_paths=args.inputs,
            dataset_id=args.dataset_id,
            out_path=args.out,
            num_freq_bins=args.bins,
            f_max_hz=args.fmax,
            anthro_csv=args.anthro,
            subject_allowlist=args.subjects,
        )
        out = convert(spec)
        report = validate_roundtrip(out)
        print(report.summary())
        return 0 if report.ok else 1
    report = validate_roundtrip(args.path)
    print(report.summary())
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
