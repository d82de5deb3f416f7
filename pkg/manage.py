#!/usr/bin/env python
"""Command-line utility for training runs, sweeps, verification and plots."""
import logging


def main():
    """Configure logging from settings and dispatch to the CLI group."""
    from randomhorizons import settings
    from horizon.cli_app import cli

    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
    cli(prog_name="manage.py")


if __name__ == '__main__':
    main()
