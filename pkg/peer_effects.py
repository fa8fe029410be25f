#!/usr/bin/env python3
"""
Peer effects with isolated students.

Run the command-line interface, for example:

    python peer_effects.py --seed 7 --out output simulate --variant C
    python peer_effects.py --out output estimate --nodes output/nodes.csv --edges output/edges.csv --model 4
    python peer_effects.py --config configs/monte_carlo.toml mc --variant C
"""

from peernet.cli import app

if __name__ == "__main__":
    app()
