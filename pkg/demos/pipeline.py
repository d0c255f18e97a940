"""Run the whole command-line pipeline on the small demo configuration.

Equivalent to ``revman all --config demos/small.toml``; artifacts land in
``revman-demo/`` under the current directory.
"""

import sys
from pathlib import Path

from revman.cli import main

if __name__ == "__main__":
    cfg = Path(__file__).with_name("small.toml")
    sys.exit(main(["all", "--config", str(cfg), *sys.argv[1:]]))
