"""
End-to-end desk-scale run: generate train/test data, train, evaluate, and
write the accumulation curve and hotspot grid.

    uv run main.py [WORKDIR]
"""

import sys
from pathlib import Path

from cmanet.dataio import read_config
from cmanet.main import run

CONFIG = Path(__file__).parent / "configs" / "desk.toml"
TRAIN_SAMPLES = 8000
WORKERS = 4


def main(workdir: Path) -> int:
    train_file = workdir / "train.bin"
    test_file = workdir / "test.bin"
    run_dir = workdir / "run"
    checkpoint = run_dir / "last.cmck"
    test_samples = read_config(CONFIG).eval.test_samples

    steps = [
        ["gen-data", "--config", str(CONFIG), "--count", str(TRAIN_SAMPLES), "--seed", "1",
         "--out", str(train_file), "--workers", str(WORKERS)],
        ["gen-data", "--config", str(CONFIG), "--count", str(test_samples), "--seed", "2",
         "--out", str(test_file), "--workers", str(WORKERS)],
        ["train", "--data", str(train_file), "--config", str(CONFIG), "--out", str(run_dir)],
        ["eval", "--checkpoint", str(checkpoint), "--data", str(test_file),
         "--out", str(workdir / "report.json"), "--untrained-baseline", "--workers", str(WORKERS)],
        ["curve", "--checkpoint", str(checkpoint), "--data", str(test_file),
         "--out", str(workdir / "curve.csv"), "--config", str(CONFIG)],
        ["hotspot", "--checkpoint", str(checkpoint), "--data", str(test_file),
         "--out", str(workdir / "hotspot.csv"), "--config", str(CONFIG)],
    ]  # fmt: skip
    for argv in steps:
        code = run(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(Path(sys.argv[1] if len(sys.argv) > 1 else "desk-run")))
