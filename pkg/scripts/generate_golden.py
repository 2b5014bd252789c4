import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from bwta_engine.bitpack import pack_ternary, unpack
from bwta_engine.cli import read_matrix
from bwta_engine.serialization import write_bwta

FIXTURES = os.path.join(os.path.dirname(__file__), '..', 'tests', 'fixtures')
GOLDEN_SCALE = 1.0


def main(source="golden_4x4.txt", target="golden_4x4.bwta"):
    source_path = os.path.join(FIXTURES, source)
    target_path = os.path.join(FIXTURES, target)

    print("[1] Reading fixture matrix...")
    matrix = read_matrix(source_path)

    print("[2] Packing ternary planes...")
    packed = pack_ternary(matrix, GOLDEN_SCALE)
    for row in unpack(packed):
        print("    " + " ".join(f"{v:2d}" for v in row))

    write_bwta(target_path, packed, GOLDEN_SCALE)
    print(f"[✔] Golden file written to {target_path} ({os.path.getsize(target_path)} bytes)")


if __name__ == "__main__":
    main()
