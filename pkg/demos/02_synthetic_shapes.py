# Generate the shapes-and-captions dataset and inspect its open-vocabulary
# structure: captions cover every category, boxes cover only base classes.

from collections import Counter

from ovdet.config import ExperimentConfig
from ovdet.data import generate_dataset, save_dataset
from ovdet.text import build_vocab, tokenize

cfg = ExperimentConfig()
cfg.seed = 7
cfg.data.n_train = 200
cfg.data.n_test = 50

ds = generate_dataset(cfg)
print("categories:", len(ds.categories))
print("base:", ds.base_categories)
print("target:", ds.target_categories)

ex = ds.train[0]
print("\nfirst training example:")
print("  caption:", ex.caption)
print("  image:", ex.image.shape, ex.image.dtype, "range",
      round(float(ex.image.min()), 3), "to", round(float(ex.image.max()), 3))
print("  annotated boxes:", [(ds.categories[g.category_id], g.box) for g in ex.gt])
print("  objects drawn but not annotated:", ex.n_hidden_objects)

# Captions mention target categories even though no training box ever does.
hidden = sum(1 for e in ds.train if e.n_hidden_objects > 0)
print(f"\n{hidden}/{len(ds.train)} training images contain unannotated (target) objects")

# The caption vocabulary strictly contains the category words.
vocab = build_vocab([e.caption for e in ds.train])
category_words = {w for n in ds.categories for w in n.split()}
print("caption vocabulary:", len(vocab), "tokens;",
      len(category_words), "of them are category words")

counts = Counter()
for e in ds.train:
    counts.update(tokenize(e.caption))
rarest = min((counts[w], w) for w in category_words)
print("rarest category word in the corpus:", rarest[1], "x", rarest[0])

# Round-trip through the on-disk format (manifests + image containers).
save_dataset(ds, "/tmp/ovdet_demo_data", cfg)
print("\nwrote /tmp/ovdet_demo_data (dataset.json, vocab.txt, manifests, image packs)")
