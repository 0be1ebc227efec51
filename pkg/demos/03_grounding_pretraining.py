# Pretrain on image-caption pairs and watch grounding emerge: caption-to-image
# retrieval and word-to-region alignment, with no box supervision at all.
#
# This is a scaled-down run (a few minutes); the acceptance suite uses the
# full desk-scale configuration.

from ovdet.config import ExperimentConfig
from ovdet.data import generate_dataset
from ovdet.grounding import (
    alignment_weights,
    pretrain,
    retrieval_recall_at_1,
    weak_localization_rate,
)
from ovdet.tensor import as_tensor, reshape

cfg = ExperimentConfig()
cfg.seed = 1
cfg.data.n_train = 600
cfg.data.n_test = 96
cfg.pretrain.steps = 600

ds = generate_dataset(cfg)
print("pretraining on", len(ds.train), "image-caption pairs ...")
result = pretrain(ds, cfg, quiet=False)

model = result.model
r1 = retrieval_recall_at_1(model, ds.test, batch_size=16)
print(f"\nheld-out caption->image retrieval recall@1 (batches of 16): {r1:.3f} (chance 0.0625)")

loc = weak_localization_rate(model, ds.test, ds.categories)
print(f"weak localization (shape word argmax inside the gt box): {loc:.3f}")

# Inspect one alignment map: which grid cell does each caption word attend to?
single = next(ex for ex in ds.test if len(ex.gt) == 1)
seq = model.encode_captions([single.caption], 0.0, None)[0]
tokens = [model.vocab.tokens[i] for i in seq.ids]
e_regions = reshape(model.region_embeddings(single.image[None]), (model.n_cells, cfg.model.d_l))
weights = alignment_weights(e_regions, as_tensor(model.table.matrix[seq.ids])).data
print("\ncaption:", single.caption)
print("gt:", ds.categories[single.gt[0].category_id], single.gt[0].box)
g = cfg.data.image_size // cfg.model.stride
for j, tok in enumerate(tokens):
    cell = int(weights[:, j].argmax())
    print(f"  {tok:>12s} -> cell (x={cell % g}, y={cell // g}) weight={weights[cell, j]:.2f}")
