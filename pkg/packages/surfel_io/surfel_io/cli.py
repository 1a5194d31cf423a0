"""
CLI entry points for surfel_io

Provides command-line interface for bundle synthesis, reconstruction and rendering.
"""

import sys


def synth_cli():
    """CLI entry point for bundle synthesis"""
    from surfel_io.synth import main
    sys.exit(main())


def reconstruct_cli():
    """CLI entry point for reconstruction"""
    from surfel_io.reconstruct import main
    sys.exit(main())


def render_cli():
    """CLI entry point for rendering"""
    from surfel_io.render import main
    sys.exit(main())


def main():
    """Main CLI dispatcher"""
    import argparse

    parser = argparse.ArgumentParser(
        description='Surfel reconstruction pipeline',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Commands:
  synth        Render a synthetic scene bundle (images, cameras, GT maps and mesh)
  reconstruct  Two-view reconstruction: splats, intermediate maps and mesh
  render       Render a splat field from a camera in cameras.json

Exit codes: 0 success, 1 verification failure, 2 input/schema error
        """
    )

    parser.add_argument(
        'command',
        choices=['synth', 'reconstruct', 'render'],
        help='Command to run'
    )

    args, remaining = parser.parse_known_args()

    # Replace sys.argv for the subcommand
    sys.argv = [f'surfel-{args.command}'] + remaining

    if args.command == 'synth':
        synth_cli()
    elif args.command == 'reconstruct':
        reconstruct_cli()
    elif args.command == 'render':
        render_cli()


if __name__ == '__main__':
    main()
