"""
nsde.cli_parsers
CLI parser construction helpers.
"""

import argparse

# argparse dest -> (config section, config key) for command-line overrides.
CONFIG_OVERRIDES: dict[str, tuple[str, str]] = {
    "dim": ("experiment", "dim"),
    "output_dir": ("experiment", "output-dir"),
    "n_samples": ("data", "n-samples"),
    "activation": ("data", "activation"),
    "noise_scale": ("data", "noise-scale"),
    "fine_factor": ("data", "fine-factor"),
    "zero_ground_truth": ("data", "zero-ground-truth"),
    "mesh_n": ("fit", "mesh-n"),
    "step_size": ("fit", "step-size"),
    "n_iters": ("fit", "n-iters"),
    "n_mc_paths": ("fit", "n-mc-paths"),
    "engine": ("fit", "engine"),
    "seed_policy": ("fit", "seed-policy"),
    "beta_mode": ("fit", "beta-mode"),
    "antithetic": ("fit", "antithetic"),
    "workers": ("fit", "workers"),
    "timing": ("fit", "timing"),
    "init_scale": ("fit", "init-scale"),
    "sweep_mesh_n": ("sweep", "mesh-n"),
    "sweep_n_samples": ("sweep", "n-samples"),
    "sweep_workers": ("sweep", "workers"),
    "seed_data": ("seeds", "data"),
    "seed_init": ("seeds", "init"),
    "seed_mc": ("seeds", "mc"),
}


def _add_config_overrides(parser) -> None:
    """Flags mirroring config keys; unset flags leave the file value alone."""
    group = parser.add_argument_group("config overrides")
    group.add_argument("--dim", type=int, help="State dimension d")
    group.add_argument("--output-dir", help="Directory for output files")
    group.add_argument("--n-samples", type=int, help="Number of observations")
    group.add_argument(
        "--activation",
        choices=["sigmoid", "tanh", "softplus"],
        help="Drift activation",
    )
    group.add_argument("--noise-scale", type=float, help="Observation noise scale")
    group.add_argument("--fine-factor", type=int, help="Data mesh refinement factor")
    group.add_argument(
        "--zero-ground-truth",
        action="store_const",
        const=True,
        default=None,
        help="Debug: generate data with A = 0",
    )
    group.add_argument("--mesh-n", type=int, help="Fit mesh steps N (h = 1/N)")
    group.add_argument("--step-size", type=float, help="Gradient-descent step size")
    group.add_argument("--n-iters", type=int, help="Gradient-descent iterations")
    group.add_argument("--n-mc-paths", type=int, help="Monte-Carlo paths per estimate")
    group.add_argument(
        "--engine",
        choices=["pathwise", "euler_backprop"],
        help="Gradient engine",
    )
    group.add_argument(
        "--seed-policy",
        choices=["fixed", "fresh"],
        help="Reuse (fixed) or redraw (fresh) noise each iteration",
    )
    group.add_argument(
        "--beta-mode",
        choices=["shared", "per_observation"],
        help="One beta for all observations, or one per observation",
    )
    group.add_argument(
        "--antithetic",
        action="store_const",
        const=True,
        default=None,
        help="Pair every noise path with its negation",
    )
    group.add_argument("--workers", type=int, help="Threads for Monte-Carlo paths")
    group.add_argument(
        "--no-timing",
        dest="timing",
        action="store_const",
        const=False,
        default=None,
        help="Write wall_ms as 0 for byte-identical histories",
    )
    group.add_argument("--init-scale", type=float, help="Scale of the random initial A")
    group.add_argument(
        "--sweep-mesh-n",
        type=int,
        nargs="+",
        metavar="N",
        help="Mesh sizes of the mesh sweep",
    )
    group.add_argument(
        "--sweep-n-samples",
        type=int,
        nargs="+",
        metavar="N",
        help="Sample sizes of the sample sweep",
    )
    group.add_argument("--sweep-workers", type=int, help="Sweep points fitted concurrently")
    group.add_argument("--seed-data", type=int, help="Seed for ground truth and data")
    group.add_argument("--seed-init", type=int, help="Seed for the initial parameters")
    group.add_argument("--seed-mc", type=int, help="Seed for Monte-Carlo noise")


def build_parser():
    """Construct the nsde argument parser.

    Separated from main() so tests can introspect the parser without side
    effects.
    """
    parser = argparse.ArgumentParser(
        prog="nsde",
        description="Variational inference for neural SDEs.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""\
examples:
  nsde init                      Generate template .config/nsde.toml in current directory
  nsde generate                  Simulate the synthetic dataset
  nsde generate --trace          Also write one noise path and its trajectory
  nsde fit --mesh-n 64           Fit with h = 1/64
  nsde fit --engine euler_backprop --no-timing
  nsde sweep --sweep mesh        Log free energy curves over mesh sizes
  nsde sweep --sweep samples     ... over sample sizes
  nsde oracle-check              Quick closed-form acceptance battery
  nsde oracle-check --full       Acceptance-scale battery
""",
    )
    parser.add_argument(
        "--no-color",
        action="store_true",
        help="Disable colored output",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress to stderr (-vv for debug)",
    )
    parser.add_argument(
        "--config",
        default=None,
        help="Config file (TOML, or JSON with a .json suffix)",
    )
    subparsers = parser.add_subparsers(dest="command")

    # --- nsde init ---
    init_parser = subparsers.add_parser(
        "init",
        help="Generate a template nsde configuration file",
        description="Write a commented .config/nsde.toml template showing all "
        "available configuration options.",
    )
    init_parser.add_argument(
        "path",
        nargs="?",
        default=".",
        help="Directory to write config to (default: current directory)",
    )
    init_parser.add_argument(
        "--force",
        "-f",
        action="store_true",
        help="Overwrite an existing target config file",
    )

    # --- nsde generate ---
    generate_parser = subparsers.add_parser(
        "generate",
        help="Simulate the synthetic dataset",
        description="Draw the ground-truth drift matrix, simulate observations and "
        "write dataset.csv, ground_truth.json and config.toml.",
    )
    generate_parser.add_argument(
        "--trace",
        action="store_true",
        help="Also write one noise path and its trajectory as CSV",
    )
    _add_config_overrides(generate_parser)

    # --- nsde fit ---
    fit_parser = subparsers.add_parser(
        "fit",
        help="Fit the model by gradient descent on the free energy",
        description="Regenerate the dataset from the data seed, fit (A, beta) and "
        "write history.csv and params.json.",
    )
    _add_config_overrides(fit_parser)

    # --- nsde sweep ---
    sweep_parser = subparsers.add_parser(
        "sweep",
        help="Fit over a range of mesh or sample sizes",
        description="Fit once per sweep point and write sweep.csv "
        "(sweep_var, value, iter, log_free_energy).",
    )
    sweep_parser.add_argument(
        "--sweep",
        choices=["mesh", "samples", "both"],
        default="mesh",
        help="Which sweep to run (default: mesh)",
    )
    _add_config_overrides(sweep_parser)

    # --- nsde oracle-check ---
    oracle_parser = subparsers.add_parser(
        "oracle-check",
        help="Run the closed-form acceptance battery",
        description="Check both gradient engines, the solver and the oracles "
        "against closed forms and print a pass/fail table.",
    )
    oracle_parser.add_argument(
        "--full",
        action="store_true",
        help="Use acceptance-scale path counts and meshes (slow)",
    )

    return parser
