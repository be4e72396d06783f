"""Recompute the calibrated urban-form SCM and write it to the package data file.

Usage: python3 scripts/calibrate_scm.py [output.json]
"""
import sys
from pathlib import Path

from urbanvkt.causal_discovery import urban_form_knowledge
from urbanvkt.synth_city import LINK_TARGETS, calibrate_scm, implied_link_strengths

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "urbanvkt" / "data" / "urban_form_scm.json"


def main(argv):
    out = Path(argv[1]) if len(argv) > 1 else DEFAULT_OUT
    knowledge = urban_form_knowledge()
    scm = calibrate_scm(knowledge=knowledge)
    scm.to_json(out)
    implied = implied_link_strengths(scm, knowledge=knowledge)
    for (p, c), target in LINK_TARGETS.items():
        rho, cond = implied[frozenset((p, c))]
        print(f"{p:>28} -> {c:<28} b={scm.coefficient(p, c):+.4f} rho={rho:+.4f} "
              f"target={target:+.2f} given={list(cond)}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main(sys.argv)
