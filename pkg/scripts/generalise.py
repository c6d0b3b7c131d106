"""Train on 40 phantoms, score 20 held-out ones."""
import argparse

from _common import dump, setup
from cmrfcn import experiments, network as net

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--iterations", type=int, default=2000)
p.add_argument("--subjects", type=int, default=60)
p.add_argument("--train", type=int, default=40)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", default="runs/generalise")
a = p.parse_args()
out = setup(a.out)

cfg = experiments.ExperimentConfig(n_subjects=a.subjects, n_train=a.train, iterations=a.iterations,
                                   cohort_seed=2, train_seed=a.seed)
model, res = experiments.generalise(cfg)
net.save_checkpoint(model, out / "model.fcnc")
dump(out / "result.json", {"heldout_dice": res.dice, "heldout_loss": res.loss, "minutes": res.seconds / 60})
