# Train the detector on base-class boxes only, then swap the classifier to
# class names that never had a single box annotation.
#
# Scaled down to run in a few minutes; absolute numbers are below the
# acceptance-scale configuration.

from ovdet.checkpoint import Checkpoint
from ovdet.config import ExperimentConfig
from ovdet.data import generate_dataset
from ovdet.detection import train_detector
from ovdet.grounding import pretrain

cfg = ExperimentConfig()
cfg.seed = 2
cfg.data.n_train = 600
cfg.data.n_test = 80
cfg.pretrain.steps = 600
cfg.detector.steps = 300

ds = generate_dataset(cfg)
print("stage 1: grounding pretraining ...")
pre = pretrain(ds, cfg)
ckpt = Checkpoint(arrays=pre.model.checkpoint_arrays(),
                  structural_hash=cfg.structural_hash(), metadata={})

print("stage 2: detector training on", len(ds.base_categories), "base classes ...")
det = train_detector(ds, cfg, pretrained=ckpt).model

# The classification head is a frozen matrix of word embeddings; swapping it
# retargets the detector without touching any other parameter.
image = ds.test[0].image[None]
truth = [(ds.categories[g.category_id], g.box) for g in ds.test[0].gt]
print("\nground truth:", truth)

for names, title in [
    (sorted(ds.base_categories), "base head"),
    (sorted(ds.target_categories), "target head (never saw a box)"),
    (sorted(set(ds.base_categories) | set(ds.target_categories)), "generalized head"),
]:
    det.set_classes(names)
    dets = det.detect(image)[0]
    print(f"\n{title}: {len(dets)} detections")
    for d in dets[:4]:
        box = [round(float(v), 1) for v in d.box]
        print(f"  {names[d.class_id]:>16s} {d.score:.3f} {box}")

# Open vocabulary literally: any word list resolves through the embedding
# derivation, including names absent from every caption.
det.set_classes(["red square", "turquoise pentagon"])
print("\ncustom head ['red square', 'turquoise pentagon']:",
      sum(len(d) for d in det.detect(image)), "detections")
