"""Mean fusion weight for supports and queries at K = 1 and K = 5."""

import sys
from pathlib import Path

from mapnet import cli

cfg = str(Path(__file__).with_name("desk.cfg"))
sys.exit(cli.main(["lambda", "--config", cfg, "--set", "shots=1,5",
                   "--out", "lambda_report.json", *sys.argv[1:]]))
