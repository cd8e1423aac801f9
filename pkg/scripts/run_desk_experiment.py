"""Desk-scale end-to-end run: corpus -> backbone -> small CD amateur -> projector -> eval.

Each stage writes into ``--outdir`` and is skipped when its checkpoint already
exists, so the script can be re-run to pick up where it stopped. The eval stage
drives the ``tegu`` CLI and leaves its reports under ``outdir/reports``.

    python scripts/run_desk_experiment.py --outdir artifacts/desk
"""

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

from tegu.cli import run as cli_run
from tegu.cmtpp import ProjectorConfig
from tegu.model import Backbone, ModelConfig
from tegu.training import (
    BACKBONE_TRAINING_DEFAULTS,
    TrainingConfig,
    ingest_corpus,
    split_corpus,
    train_backbone,
    train_projector,
)

ROOT = Path(__file__).resolve().parents[1]

EXPERIMENT = {
    "model": ModelConfig().to_dict(),
    "backbone_training": TrainingConfig(**BACKBONE_TRAINING_DEFAULTS).to_dict(),
    "amateur_model": ModelConfig(d_model=64, n_layers=2, n_heads=2, seed=1).to_dict(),
    "amateur_training": TrainingConfig(**BACKBONE_TRAINING_DEFAULTS, total_steps=1500, seed=1).to_dict(),
    "projector": ProjectorConfig().to_dict(),
    "projector_training": TrainingConfig(offsets=(1, 2)).to_dict(),
    "holdout_fraction": 0.05,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--outdir", type=Path, default=ROOT / "artifacts" / "desk")
    ap.add_argument("--corpus", type=Path, default=ROOT / "data" / "corpus.txt")
    ap.add_argument("--stages", default="backbone,amateur,projector,eval")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ckpt = args.outdir / "checkpoints"
    reports = args.outdir / "reports"
    ckpt.mkdir(parents=True, exist_ok=True)
    reports.mkdir(parents=True, exist_ok=True)
    (args.outdir / "experiment.json").write_text(json.dumps(EXPERIMENT, indent=2, sort_keys=True))

    if not args.corpus.exists():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "build_corpus.py"), str(args.corpus)], check=True)
    train_tokens, _ = split_corpus(ingest_corpus(args.corpus), EXPERIMENT["holdout_fraction"])
    stages = args.stages.split(",")

    if "backbone" in stages and not (ckpt / "backbone.tegu").exists():
        t0 = time.time()
        bb, _ = train_backbone(
            train_tokens,
            ModelConfig(**EXPERIMENT["model"]),
            TrainingConfig.from_dict(EXPERIMENT["backbone_training"]),
            log_path=reports / "backbone_loss.csv",
        )
        bb.save(ckpt / "backbone.tegu")
        logging.info("backbone done in %.0fs", time.time() - t0)

    if "amateur" in stages and not (ckpt / "amateur.tegu").exists():
        am, _ = train_backbone(
            train_tokens,
            ModelConfig(**EXPERIMENT["amateur_model"]),
            TrainingConfig.from_dict(EXPERIMENT["amateur_training"]),
            log_path=reports / "amateur_loss.csv",
        )
        am.save(ckpt / "amateur.tegu")

    if "projector" in stages and not (ckpt / "projector.tegu").exists():
        bb = Backbone.load(ckpt / "backbone.tegu")
        before = bb.digest()
        t0 = time.time()
        proj, _ = train_projector(
            train_tokens,
            bb,
            ProjectorConfig(**EXPERIMENT["projector"]),
            TrainingConfig.from_dict(EXPERIMENT["projector_training"]),
            log_path=reports / "projector_loss.csv",
        )
        if bb.digest() != before:
            raise RuntimeError("backbone parameters changed during projector training")
        proj.save(ckpt / "projector.tegu")
        logging.info("projector done in %.0fs", time.time() - t0)

    if "eval" in stages:
        common = ["--corpus", str(args.corpus), "--outdir", str(args.outdir), "--json"]
        for argv in (
            ["eval-entropy", "--offsets", "1,2"],
            ["compare", "--modes", "greedy,cd,tegu", "--alpha", "0.3"],
            ["sweep-alpha", "--values", "0.1,0.2,0.3,0.4,0.5"],
        ):
            t0 = time.time()
            code = cli_run(argv + common)
            logging.info("%s exit %d in %.0fs", argv[0], code, time.time() - t0)
            if code:
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
