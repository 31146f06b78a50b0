"""
nsde.cli_dispatch
CLI command dispatch helpers.
"""


def dispatch_command(args, parser):
    """Dispatch parsed CLI args to the appropriate command handler."""
    if args.command == "init":
        from nsde.init import run

        return run(args)

    if args.command == "generate":
        from nsde.commands import run_generate

        return run_generate(args)

    if args.command == "fit":
        from nsde.commands import run_fit

        return run_fit(args)

    if args.command == "sweep":
        from nsde.commands import run_sweep

        return run_sweep(args)

    if args.command == "oracle-check":
        from nsde.oracle_check import run

        return run(args)

    parser.print_help()
    return 2
