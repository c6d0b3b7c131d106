"""Train on 10 phantoms and score the training set."""
import argparse

from _common import dump, setup
from cmrfcn import experiments, network as net

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--iterations", type=int, default=1000)
p.add_argument("--subjects", type=int, default=10)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", default="runs/overfit")
a = p.parse_args()
out = setup(a.out)

cfg = experiments.ExperimentConfig(n_subjects=a.subjects, n_train=a.subjects, iterations=a.iterations,
                                   train_seed=a.seed)
model, res = experiments.overfit(cfg)
net.save_checkpoint(model, out / "model.fcnc")
dump(out / "result.json", {"dice": res.dice, "train_set_loss": res.loss, "last_batch_loss": res.final_batch_loss,
                           "minutes": res.seconds / 60, "trace": [(r.iteration, r.loss) for r in res.trace]})
