"""
Streaming teacher features to a binary dump and back
====================================================

Feature dumps hold (summary, feature grid) records in a fixed-shape binary
file: little-endian header, float32 payload, count patched in after the
stream ends so generators of unknown length work. Useful for freezing a
teacher's outputs once and training against the file.
"""

import os
import tempfile

import numpy as np

from multidistill.data import image_batch
from multidistill.dumpio import read_dump, read_header, write_dump
from multidistill.teachers import SyntheticTeacherSpec, synth_forward

spec = SyntheticTeacherSpec(channels=16, summary_dim=32, patch=16, semantic_seed=3)
rng = np.random.default_rng(0)
images = image_batch(rng, 5, 64)

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "teacher.rfd")

    # write from a generator; shapes are locked in by the first record
    header = write_dump(path, (synth_forward(spec, img) for img in images))
    print(f"wrote {header.count} records, grid {header.rows}x{header.cols}"
          f"x{header.channels}, summary dim {header.summary_dim}")
    print(f"file size {os.path.getsize(path)} bytes "
          f"({header.payload_bytes} payload)")

    # the header alone is enough to know every record's layout
    assert read_header(path) == header

    # records come back in order; storage is float32, so compare at that precision
    for i, (summary, feats) in enumerate(read_dump(path)):
        orig_s, orig_f = synth_forward(spec, images[i])
        ok_s = np.allclose(summary, orig_s.astype(np.float32))
        ok_f = np.allclose(feats.data, orig_f.data.astype(np.float32))
        print(f"record {i}: summary match {ok_s}, features match {ok_f}")
