#!/usr/bin/env python3
# Where does the generator go?  A unit Gaussian "stable" cluster in 2-D makes
# the repulsion dynamics visible: we track generator sample radii and the
# discriminator's verdict on held-out cluster points and on points beyond
# the margin.

import sys

import numpy as np

from ganstab.gan import DiscriminatorConfig, GeneratorConfig, TrainConfig, ood_margin_fraction, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
adv = len(sys.argv) > 2 and sys.argv[2] == "at"

x = np.random.default_rng(0).standard_normal((500, 2))
near = np.random.default_rng(1).standard_normal((1000, 2))
theta = np.random.default_rng(2).uniform(0, 2 * np.pi, 1000)
r = np.random.default_rng(3).uniform(4, 8, 1000)
far = np.c_[r * np.cos(theta), r * np.sin(theta)]

cfg = TrainConfig(epochs=epochs, seed=0, adversarial_layer=adv,
                  generator=GeneratorConfig(output_dim=2), discriminator=DiscriminatorConfig(input_dim=2))


def report(epoch, model, rec):
    if epoch % 10 and epoch != epochs:
        return
    radii = np.linalg.norm(model.sample(500, np.random.default_rng(0)), axis=1)
    q = np.quantile(radii, [0.1, 0.5, 0.9])
    print(f"epoch {epoch:>4}  repulsion {rec.repulsion_loss:.3f}  "
          f"G radius q10/50/90 {q[0]:.2f}/{q[1]:.2f}/{q[2]:.2f}  "
          f"ood {ood_margin_fraction(model, x, 500):.3f}  "
          f"near->stable {np.mean(model.score(near) >= 0.5):.3f}  "
          f"far->unstable {np.mean(model.score(far) < 0.5):.3f}")


train(x, cfg, on_epoch_end=report)

# The margin (4) is wider than the whole cluster, so the hinge is active for
# nearly every pair and its gradient is bounded; the generator settles where
# it balances the discriminator's pull, around the cluster edge.
