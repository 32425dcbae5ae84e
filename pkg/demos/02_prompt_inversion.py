"""Invert an image into a pseudo-word token and splice it into the text prompt.

The text encoder never sees a token id for the image. Instead the image
feature is mapped by phi into one token-embedding row, and the embedding
sequence [SOT, prefix, <pseudo>, ", " + meme text, EOT] is encoded directly.
"""

import numpy as np

from memefusion.backbone import MockBackbone
from memefusion.data import generate_synthetic_confounders, load_image
from memefusion.inversion import (
    PhiNetwork,
    PromptTemplate,
    build_prompt,
    encode_multimodal_text,
    invert,
    prompt_token_ids,
    pseudo_slot_index,
)

backbone = MockBackbone(seed=0)
phi = PhiNetwork.stub(d=backbone.meta.d, w=backbone.meta.w, seed=0)
template = PromptTemplate()
print(f"backbone: d={backbone.meta.d} w={backbone.meta.w} context={backbone.meta.context_len}")
print(f"template: prefix={template.prefix!r} separator={template.separator!r}")

record = generate_synthetic_confounders(n=4, seed=7).records[0]
image = load_image(record)

# step 1: frozen visual feature, then phi maps it to token-embedding width
visual = backbone.encode_image(image)
pseudo = invert(visual, phi)
print(f"\nvisual feature {visual.values.shape} -> pseudo token {pseudo.values.shape}")

# step 2: ids around the slot; the pseudo row has no id of its own
head_ids, tail_ids = prompt_token_ids(record.text, backbone, template)
slot = pseudo_slot_index(template, backbone)
print(f"head ids {head_ids} + [pseudo @ {slot}] + tail ids {tail_ids[:6]}...{tail_ids[-1:]}")

# step 3: splice and encode
seq = build_prompt(pseudo, record.text, backbone, template)
feature = backbone.encode_token_embeddings(seq)
print(f"prompt rows={seq.length} eot_index={seq.eot_index} -> feature {feature.values.shape}")

# the one-call helper is the same computation
again = encode_multimodal_text(image, record.text, backbone, phi)
print(f"helper matches staged path bit for bit: {np.array_equal(feature.values, again.values)}")

# the feature reacts to both modalities
other = generate_synthetic_confounders(n=4, seed=8).records[1]
diff_img = encode_multimodal_text(load_image(other), record.text, backbone, phi)
diff_txt = encode_multimodal_text(image, "something else entirely", backbone, phi)
print(f"L2 shift from swapping the image: {np.linalg.norm(feature.values - diff_img.values):.4f}")
print(f"L2 shift from swapping the text:  {np.linalg.norm(feature.values - diff_txt.values):.4f}")

# tail-only truncation: SOT, prefix, pseudo slot, and EOT always survive
overlong = "word " * 200
backbone.stats.truncations = 0
h, t = prompt_token_ids(overlong, backbone, template)
print(f"\noverlong meme text: prompt fills context exactly "
      f"({len(h)} + 1 + {len(t)} = {backbone.meta.context_len}), "
      f"truncations={backbone.stats.truncations}")
