"""Regenerate the shipped graph files from the block builders."""

import sys
from pathlib import Path

from shadownet.netgraph.blocks import write_shipped

target = Path(sys.argv[1]) if len(sys.argv) > 1 else \
    Path(__file__).resolve().parent.parent / "src" / "shadownet" / "data" / "graphs"
for path in write_shipped(target):
    print(path)
