"""
CLI entry points for surfel_bench

Provides command-line interface for evaluation, gradient checks and ablations.
"""

import sys


def eval_cli():
    """CLI entry point for mesh / depth / normal evaluation"""
    from surfel_bench.evaluate import main
    sys.exit(main())


def gradcheck_cli():
    """CLI entry point for the finite-difference gradient suite"""
    from surfel_bench.gradcheck import main
    sys.exit(main())


def ablate_cli():
    """CLI entry point for the loss ablation"""
    from surfel_bench.ablate import main
    sys.exit(main())


def main():
    """Main CLI dispatcher"""
    import argparse

    parser = argparse.ArgumentParser(
        description='Surfel reconstruction metrics and verification tools',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Commands:
  eval        Chamfer / F1 of a mesh against GT (plus depth and normal metrics)
  gradcheck   Compare every analytic gradient with finite differences
  ablate      Fit a bundle once per loss variant and evaluate each mesh

Exit codes: 0 success, 1 verification failure, 2 input/schema error
        """
    )

    parser.add_argument(
        'command',
        choices=['eval', 'gradcheck', 'ablate'],
        help='Command to run'
    )

    args, remaining = parser.parse_known_args()

    # Replace sys.argv for the subcommand
    sys.argv = [f'surfel-bench-{args.command}'] + remaining

    if args.command == 'eval':
        eval_cli()
    elif args.command == 'gradcheck':
        gradcheck_cli()
    elif args.command == 'ablate':
        ablate_cli()


if __name__ == '__main__':
    main()
