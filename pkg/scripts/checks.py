"""Gradient suite and oracle suite; exit status 1 if any check fails."""

import sys

from mapnet import cli

sys.exit(cli.main(["gradcheck"]) or cli.main(["oracle"]))
