"""Reference tile encoder and the HSAE embedding file."""

import os
import tempfile

import numpy as np

from stainalign.encoding import EncoderSpec, encode_slide, histogram_features, projection_matrix
from stainalign.store import read_embeddings, write_embeddings
from stainalign.synth import synth_images
from stainalign.tiling import tile_image

spec = EncoderSpec(d=64, seed=42)
pairs = synth_images(n_slides=4, seed=3, size=1024)

# Features are 3 x 8 intensity histograms; the projection is fixed by the seed.
print("projection", projection_matrix(spec).shape)
for pair in pairs:
    patches, _ = tile_image(pair.he, "he")
    feats = np.mean([histogram_features(px) for _, px in patches], axis=0)
    # the dark nucleus colour sits in the low bins of the red channel
    print(pair.slide_id, "label", pair.label, "patches", len(patches), "red bins", feats[:8].round(3))

# Encode one slide and store it.
patches, _ = tile_image(pairs[0].he, "he")
tiles = encode_slide(patches, spec)
path = os.path.join(tempfile.mkdtemp(), "s000_he.hsae")
write_embeddings(tiles, path)
print("wrote", os.path.getsize(path), "bytes for", len(tiles), "tiles of dim", spec.d)
back = read_embeddings(path)
print("roundtrip identical:", back == tiles)
print("first tile at", (back[0].x, back[0].y), back[0].vector[:4])
