"""Regenerate the demo golden files. Run only after an intentional numeric change.

    python tests/golden/make_golden.py
"""
from pathlib import Path

from rf_transfer import containers, imageio
from rf_transfer.cli import _job
from rf_transfer.config import load_config
from rf_transfer.pipeline import run_transfer

HERE = Path(__file__).resolve().parent
ROOT = HERE.parents[1]


def main():
    cfg = load_config(ROOT / "configs" / "demo.ini")
    cfg.seed = cfg.seed if cfg.seed is not None else 0

    class _Args:
        pass

    res = run_transfer(_job(_Args(), cfg), cfg.load_weights(), cfg.prior())
    imageio.write_ppm(HERE / "demo_transfer.ppm", res.output)
    containers.save(HERE / "demo_transfer.raw", b"RFGD", {"kind": "golden"}, {"raw": res.raw})
    print("golden files written to", HERE)


if __name__ == "__main__":
    main()
