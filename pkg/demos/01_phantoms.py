"""Synthetic glomerulus phantoms and the class hierarchy.

Renders one phantom, checks that its masks honour Cap > Tuft > Mes and
GS overlapping Cap, and writes a contact sheet of the 14 masks.

    python demos/01_phantoms.py [out.png]
"""
import sys

import numpy as np
from PIL import Image

from glomseg.synth import check_hierarchy, generate_phantom, random_phantom_spec
from glomseg.taxonomy import TAXONOMY

sample = generate_phantom(random_phantom_spec(seed=7, canvas=256))
check_hierarchy(sample.masks)

for cls in TAXONOMY:
    area = sample.masks[cls.code].mean()
    print(f"{cls.code:5s} {cls.group:7s} {'/'.join(sorted(cls.species)):13s} area {100 * area:5.1f}%")

tiles = [sample.image] + [np.repeat(sample.masks[c][..., None] * 255, 3, 2).astype(np.uint8) for c in TAXONOMY.codes]
tiles += [np.zeros_like(sample.image)]
rows = [np.concatenate(tiles[i:i + 5], 1) for i in range(0, 15, 5)]
out = sys.argv[1] if len(sys.argv) > 1 else "phantom_sheet.png"
Image.fromarray(np.concatenate(rows, 0)).save(out)
print("wrote", out)
