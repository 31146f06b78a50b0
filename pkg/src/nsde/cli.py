"""
nsde.cli
Thin CLI entry point and orchestration layer.
"""

from __future__ import annotations

import os
import sys

from nsde.cli_dispatch import dispatch_command
from nsde.cli_parsers import build_parser
from nsde.console import Colors, setup_logging


def main(argv=None):
    parser = build_parser()

    effective_argv = list(argv) if argv is not None else sys.argv[1:]
    args = parser.parse_args(effective_argv)

    # Handle --no-color and NO_COLOR env var
    if args.no_color or os.environ.get("NO_COLOR") is not None:
        Colors.disable()

    setup_logging(args.verbose)

    if not args.command:
        parser.print_help()
        return 2

    return dispatch_command(args, parser)


if __name__ == "__main__":
    sys.exit(main())
