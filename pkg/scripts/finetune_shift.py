"""Score a trained checkpoint on contrast-shifted phantoms before and after fine-tuning."""
import argparse

from _common import dump, setup
from cmrfcn import experiments, network as net

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("checkpoint", help="e.g. runs/generalise/model.fcnc")
p.add_argument("--iterations", type=int, default=500)
p.add_argument("--out", default="runs/finetune")
a = p.parse_args()
out = setup(a.out)

tuned, res = experiments.finetune_shift(net.load_checkpoint(a.checkpoint, expected_k=4), iterations=a.iterations)
net.save_checkpoint(tuned, out / "finetuned.fcnc")
dump(out / "result.json", {"before": res.before, "after": res.after, "improvement": res.improvement,
                           "minutes": res.seconds / 60})
