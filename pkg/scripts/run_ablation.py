"""Component ablation (six mode rows) plus the two auxiliary-constraint rows.

Usage: python scripts/run_ablation.py [out_dir] [key=value ...]
Writes ablation.json/.csv (component rows) and aux_ablation.json.
"""

import sys
from pathlib import Path

from mapnet import cli
from mapnet.config import resolve_config
from mapnet.model import CONSTRAINT_MODES
from mapnet.trainer import ablation_run

args = sys.argv[1:]
out = Path(args.pop(0)) if args and "=" not in args[0] else Path("reports")
out.mkdir(parents=True, exist_ok=True)
cfg_path = str(Path(__file__).with_name("desk.cfg"))
sets = [x for kv in args for x in ("--set", kv)]
code = cli.main(["ablate", "--config", cfg_path, "--out", str(out / "ablation.json"), *sets])
if code == 0:
    cfg = resolve_config(cfg_path, args)
    rows = ablation_run(cli.load_dataset(cfg), cfg.train, CONSTRAINT_MODES, split=cfg.run.split)
    cli.write_json(out / "aux_ablation.json",
                   {"config": cfg.to_dict(), "seed": cfg.train.seed,
                    "rows": [r.to_dict() for r in rows]})
    for r in rows:
        print(f"{r.mode.label:10s} {r.report.accuracy:.2f} +- {r.report.ci95:.2f}")
sys.exit(code)
