"""Shared paths for the demo scripts."""

from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CHECKPOINT = ROOT / "checkpoints" / "toy.fctl"
OUT = ROOT / "demos" / "out"
OUT.mkdir(parents=True, exist_ok=True)
