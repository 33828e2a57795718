"""Main entry point for Kalos when run as a module.

This allows running the CLI using:
    python -m kalos
"""

from .cli import main

if __name__ == "__main__":
    main()
